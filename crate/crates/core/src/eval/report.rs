use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalOptions, RocCurve, RocPoint};
use crate::error::{Error, Result};

pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const ROC_CSV: &str = "roc.csv";
pub const ROC_PNG: &str = "roc.png";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub auc_roc: f64,
    pub mean_iou: f64,
    pub ssim: f64,
}

impl ImageMetrics {
    pub const CSV_HEADER: &'static str = "image_id,f1,sensitivity,specificity,accuracy,auc_roc,mean_iou,ssim";

    pub fn values(&self) -> [f64; 7] {
        [
            self.f1,
            self.sensitivity,
            self.specificity,
            self.accuracy,
            self.auc_roc,
            self.mean_iou,
            self.ssim,
        ]
    }

    fn from_values(image_id: String, v: [f64; 7]) -> Self {
        Self {
            image_id,
            f1: v[0],
            sensitivity: v[1],
            specificity: v[2],
            accuracy: v[3],
            auc_roc: v[4],
            mean_iou: v[5],
            ssim: v[6],
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = self.image_id.clone();
        for v in self.values() {
            write!(s, ",{v:.6}").unwrap();
        }
        s
    }

    /// Column-wise mean, labelled `mean`.
    pub fn mean(rows: &[ImageMetrics]) -> Self {
        let mut acc = [0.0; 7];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        Self::from_values("mean".into(), acc.map(|a| a / rows.len() as f64))
    }
}

/// Per-image metrics of one test set plus their mean and the pooled ROC.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub options: EvalOptions,
    pub images: Vec<ImageMetrics>,
    pub mean: ImageMetrics,
    /// AUC of the curve pooled over every FoV pixel of the set.
    pub pooled_auc: f64,
    /// Kept out of the JSON; persisted as `roc.csv`.
    #[serde(skip)]
    pub roc: Option<RocCurve>,
}

impl EvalReport {
    pub fn new(dataset: impl Into<String>, options: EvalOptions, images: Vec<ImageMetrics>, roc: RocCurve) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Eval("a report needs at least one image".into()));
        }
        Ok(Self {
            dataset: dataset.into(),
            options,
            mean: ImageMetrics::mean(&images),
            images,
            pooled_auc: roc.auc,
            roc: Some(roc),
        })
    }

    /// One row per image followed by the mean row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", ImageMetrics::CSV_HEADER);
        for r in self.images.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// Write `report.csv` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(REPORT_CSV);
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(REPORT_JSON);
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        Ok((csv, json))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl RocCurve {
    /// `threshold,fpr,tpr` rows; endpoint thresholds are written as `inf`/`-inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr).unwrap();
        }
        s
    }

    /// Parse [`RocCurve::to_csv`] output; the AUC is recomputed by the
    /// trapezoid rule over the stored rates.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("threshold,fpr,tpr") {
            return Err(Error::Eval("ROC CSV lacks the threshold,fpr,tpr header".into()));
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<f64> = line
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Eval(format!("ROC CSV line {}: {e}", i + 2)))?;
            let [threshold, fpr, tpr] = f[..] else {
                return Err(Error::Eval(format!("ROC CSV line {}: expected 3 fields", i + 2)));
            };
            points.push(RocPoint { threshold, fpr, tpr });
        }
        if points.len() < 2 {
            return Err(Error::Eval("ROC CSV holds fewer than two points".into()));
        }
        let auc = points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum();
        Ok(Self { auc, points })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RocArtifacts {
    pub csv: PathBuf,
    pub png: PathBuf,
}

/// Write the pooled curve of `report` as `roc.csv` and `roc.png` in `out_dir`.
pub fn emit_roc_artifacts(report: &EvalReport, out_dir: &Path) -> Result<RocArtifacts> {
    let roc = report
        .roc
        .as_ref()
        .ok_or_else(|| Error::Eval("report carries no ROC curve".into()))?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join(ROC_CSV);
    fs::write(&csv, roc.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let png = out_dir.join(ROC_PNG);
    super::render_roc(roc)
        .save(&png)
        .map_err(|e| Error::image(&png, e))?;
    Ok(RocArtifacts { csv, png })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> RocCurve {
        RocCurve::from_samples(vec![(0.9, true), (0.7, false), (0.6, true), (0.1, false)]).unwrap()
    }

    #[test]
    fn roc_csv_round_trip() {
        let c = curve();
        let text = c.to_csv();
        assert_eq!(text.lines().count(), 1 + c.distinct_thresholds() + 2);
        let back = RocCurve::from_csv(&text).unwrap();
        assert_eq!(back.points, c.points);
        assert!((back.auc - c.auc).abs() < 1e-12);
    }

    #[test]
    fn report_has_mean_row() {
        let m = |id: &str, v: f64| ImageMetrics::from_values(id.into(), [v; 7]);
        let r = EvalReport::new("DRIVE", EvalOptions::default(), vec![m("a", 0.5), m("b", 1.0)], curve()).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().last().unwrap().starts_with("mean,0.750000"));
        assert!(EvalReport::new("DRIVE", EvalOptions::default(), vec![], curve()).is_err());
    }
}

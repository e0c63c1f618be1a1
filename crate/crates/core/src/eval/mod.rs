//! Segmentation metrics scored inside the field of view.
//!
//! Confidence maps hold per-pixel vessel probabilities in `[0, 1]`; a pixel is
//! called vessel iff its confidence is strictly above the threshold. Ratios
//! whose denominator counts no pixels are defined as 1: there was nothing to
//! miss.

mod plot;
mod report;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};

pub use plot::{render_overlay, render_roc, write_overlay};
pub use report::{emit_roc_artifacts, EvalReport, ImageMetrics, RocArtifacts, REPORT_CSV, REPORT_JSON, ROC_CSV, ROC_PNG};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Map generator output in `[-1, 1]` to a confidence in `[0, 1]`.
pub fn confidence_from_output(map: &Array2<f32>) -> Array2<f32> {
    map.mapv(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0))
}

/// `1` where `conf > t`.
pub fn binarize(conf: &Array2<f32>, t: f64) -> Result<Array2<u8>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Eval(format!("threshold {t} is outside (0, 1)")));
    }
    Ok(conf.mapv(|v| u8::from(f64::from(v) > t)))
}

fn check_dims(what: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Pixel counts over the field of view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn count(pred: &Array2<u8>, gt: &Array2<u8>, fov: &Array2<u8>) -> Result<Self> {
        check_dims("prediction and ground truth", pred.dim(), gt.dim())?;
        check_dims("prediction and FoV mask", pred.dim(), fov.dim())?;
        let mut c = Confusion::default();
        Zip::from(pred).and(gt).and(fov).for_each(|&p, &g, &m| {
            if m == 0 {
                return;
            }
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        });
        if c.total() == 0 {
            return Err(Error::Eval("field of view is empty".into()));
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    /// Mean of the vessel and background Jaccard indices.
    pub fn mean_iou(&self) -> f64 {
        let vessel = ratio(self.tp, self.tp + self.fp + self.fn_);
        let background = ratio(self.tn, self.tn + self.fp + self.fn_);
        (vessel + background) / 2.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
}

pub fn confusion_metrics(pred: &Array2<u8>, gt: &Array2<u8>, fov: &Array2<u8>) -> Result<ConfusionMetrics> {
    let c = Confusion::count(pred, gt, fov)?;
    Ok(ConfusionMetrics {
        f1: c.f1(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        accuracy: c.accuracy(),
    })
}

pub fn mean_iou(pred: &Array2<u8>, gt: &Array2<u8>, fov: &Array2<u8>) -> Result<f64> {
    Ok(Confusion::count(pred, gt, fov)?.mean_iou())
}

/// One operating point: pixels with `score >= threshold` are called vessel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    /// `(+inf, 0, 0)`, one point per distinct score in decreasing order, then
    /// `(-inf, 1, 1)`. Both rates are nondecreasing.
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Build from `(score, is_vessel)` samples.
    pub fn from_samples(mut samples: Vec<(f64, bool)>) -> Result<Self> {
        if samples.iter().any(|(s, _)| !s.is_finite()) {
            return Err(Error::Eval("confidence map holds non-finite values".into()));
        }
        let pos = samples.iter().filter(|(_, y)| *y).count() as u64;
        let neg = samples.len() as u64 - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Eval(
                "ROC needs both vessel and background pixels inside the field of view".into(),
            ));
        }
        samples.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut points = vec![RocPoint {
            threshold: f64::INFINITY,
            fpr: 0.0,
            tpr: 0.0,
        }];
        let (mut tp, mut fp) = (0u64, 0u64);
        let mut area = 0.0;
        let mut i = 0;
        while i < samples.len() {
            let score = samples[i].0;
            let (tp0, fp0) = (tp, fp);
            while i < samples.len() && samples[i].0 == score {
                if samples[i].1 {
                    tp += 1;
                } else {
                    fp += 1;
                }
                i += 1;
            }
            // trapezoid in count space keeps the sum exact until the final division
            area += (fp - fp0) as f64 * (tp + tp0) as f64;
            points.push(RocPoint {
                threshold: score,
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
            });
        }
        points.push(RocPoint {
            threshold: f64::NEG_INFINITY,
            fpr: 1.0,
            tpr: 1.0,
        });
        Ok(Self {
            auc: area / (2.0 * pos as f64 * neg as f64),
            points,
        })
    }

    /// Distinct thresholds, excluding the two endpoints.
    pub fn distinct_thresholds(&self) -> usize {
        self.points.len() - 2
    }
}

fn fov_samples(conf: &Array2<f32>, gt: &Array2<u8>, fov: &Array2<u8>) -> Result<Vec<(f64, bool)>> {
    check_dims("confidence map and ground truth", conf.dim(), gt.dim())?;
    check_dims("confidence map and FoV mask", conf.dim(), fov.dim())?;
    let mut out = Vec::new();
    Zip::from(conf).and(gt).and(fov).for_each(|&c, &g, &m| {
        if m != 0 {
            out.push((f64::from(c), g != 0));
        }
    });
    Ok(out)
}

/// Area under the ROC curve of `conf` against `gt`, scored inside `fov`.
pub fn auc_roc(conf: &Array2<f32>, gt: &Array2<u8>, fov: &Array2<u8>) -> Result<RocCurve> {
    RocCurve::from_samples(fov_samples(conf, gt, fov)?)
}

/// Pooled curve over several images.
pub fn pooled_roc<'a>(items: impl IntoIterator<Item = (&'a Array2<f32>, &'a ImageRecord)>) -> Result<RocCurve> {
    let mut all = Vec::new();
    for (conf, rec) in items {
        all.extend(fov_samples(conf, &rec.vessel_gt, &rec.fov_mask)?);
    }
    RocCurve::from_samples(all)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    /// Confidence map scored as is.
    #[default]
    Continuous,
    /// Confidence map thresholded before scoring.
    Binarized,
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering: output is `(h - k + 1, w - k + 1)`.
fn filter_valid(x: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = x.dim();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, wo));
    for r in 0..h {
        for c in 0..wo {
            rows[[r, c]] = taps.iter().enumerate().map(|(j, t)| t * x[[r, c + j]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((ho, wo));
    for r in 0..ho {
        for c in 0..wo {
            out[[r, c]] = taps.iter().enumerate().map(|(j, t)| t * rows[[r + j, c]]).sum();
        }
    }
    out
}

/// Mean structural similarity of two maps with dynamic range 1, over every
/// position where the Gaussian window fits.
pub fn ssim(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    check_dims("SSIM operands", a.dim(), b.dim())?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Eval(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid(&(a * a), &taps);
    let bb = filter_valid(&(b * b), &taps);
    let ab = filter_valid(&(a * b), &taps);
    let mut total = 0.0;
    Zip::from(&mu_a).and(&mu_b).and(&aa).and(&bb).and(&ab).for_each(|&ma, &mb, &saa, &sbb, &sab| {
        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    });
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub threshold: f64,
    pub ssim_mode: SsimMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            ssim_mode: SsimMode::Continuous,
        }
    }
}

/// All metrics for one full-size confidence map.
pub fn evaluate_image(conf: &Array2<f32>, record: &ImageRecord, opts: &EvalOptions) -> Result<ImageMetrics> {
    let (gt, fov) = (&record.vessel_gt, &record.fov_mask);
    check_dims(&format!("{}: confidence map and image", record.image_id), conf.dim(), gt.dim())?;
    let pred = binarize(conf, opts.threshold)?;
    let c = Confusion::count(&pred, gt, fov)?;
    let roc = auc_roc(conf, gt, fov).map_err(|e| Error::Eval(format!("{}: {e}", record.image_id)))?;
    let scored = match opts.ssim_mode {
        SsimMode::Continuous => conf.mapv(f64::from),
        SsimMode::Binarized => pred.mapv(f64::from),
    };
    let inside = |v: &Array2<f64>| {
        let mut v = v.clone();
        Zip::from(&mut v).and(fov).for_each(|x, &m| {
            if m == 0 {
                *x = 0.0;
            }
        });
        v
    };
    let s = ssim(&inside(&scored), &inside(&gt.mapv(f64::from)))?;
    Ok(ImageMetrics {
        image_id: record.image_id.clone(),
        f1: c.f1(),
        sensitivity: c.sensitivity(),
        specificity: c.specificity(),
        accuracy: c.accuracy(),
        auc_roc: roc.auc,
        mean_iou: c.mean_iou(),
        ssim: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn binarize_is_strict() {
        let conf = Array2::from_elem((2, 2), 0.5001f32);
        assert!(binarize(&conf, 0.5).unwrap().iter().all(|&v| v == 1));
        let conf = Array2::from_elem((2, 2), 0.5f32);
        assert!(binarize(&conf, 0.5).unwrap().iter().all(|&v| v == 0));
        assert!(binarize(&conf, 1.0).is_err());
    }

    #[test]
    fn two_by_two_confusion() {
        let pred = array![[1u8, 1], [0, 0]];
        let gt = array![[1u8, 0], [1, 0]];
        let fov = Array2::ones((2, 2));
        let m = confusion_metrics(&pred, &gt, &fov).unwrap();
        assert_eq!((m.sensitivity, m.specificity, m.accuracy, m.f1), (0.5, 0.5, 0.5, 0.5));
        assert!((mean_iou(&pred, &gt, &fov).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let complement = gt.mapv(|v| 1 - v);
        assert_eq!(mean_iou(&complement, &gt, &fov).unwrap(), 0.0);
    }

    #[test]
    fn empty_fov_is_an_error() {
        let z = Array2::<u8>::zeros((3, 3));
        assert!(matches!(confusion_metrics(&z, &z, &z), Err(Error::Eval(_))));
        assert!(mean_iou(&z, &z, &z).is_err());
    }

    #[test]
    fn auc_small_cases() {
        let s = |v: &[(f64, bool)]| RocCurve::from_samples(v.to_vec()).unwrap().auc;
        assert_eq!(s(&[(0.9, true), (0.8, true), (0.4, false), (0.2, false)]), 1.0);
        assert_eq!(s(&[(0.9, true), (0.2, true), (0.8, false), (0.4, false)]), 0.5);
        assert!(RocCurve::from_samples(vec![(0.3, true), (0.4, true)]).is_err());
    }

    #[test]
    fn roc_layout() {
        let c = RocCurve::from_samples(vec![(0.9, true), (0.9, false), (0.1, false), (0.5, true)]).unwrap();
        assert_eq!(c.points.len(), 3 + 2);
        assert_eq!(c.distinct_thresholds(), 3);
        assert!(c.points.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
    }

    #[test]
    fn ssim_constant_images() {
        let a = Array2::<f64>::zeros((16, 16));
        let b = Array2::<f64>::ones((16, 16));
        let c1 = SSIM_K1 * SSIM_K1;
        let v = ssim(&a, &b).unwrap();
        assert!((v - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!(ssim(&Array2::zeros((10, 20)), &Array2::zeros((10, 20))).is_err());
    }

    #[test]
    fn window_is_normalized_and_symmetric() {
        let t = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(t[0], t[10]);
    }
}

//! Run configuration: one TOML document, validated as a whole, with
//! command-line overrides applied on top.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{content_hash, DatasetId, DEFAULT_FOLDS, PATCH_SIZE, TEST_STRIDE, TRAIN_STRIDE};
use crate::error::{Error, Result};
use crate::eval::{EvalOptions, SsimMode, DEFAULT_THRESHOLD};
use crate::infer::InferOptions;
use crate::training::{NetworkSpecs, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_root: PathBuf,
    /// Caches and run directories are created below this directory.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            work_dir: PathBuf::from("work"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    pub patch_size: usize,
    pub train_stride: usize,
    pub folds: usize,
    pub fold_seed: u64,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self {
            patch_size: PATCH_SIZE,
            train_stride: TRAIN_STRIDE,
            folds: DEFAULT_FOLDS,
            fold_seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub test_stride: usize,
    pub threshold: f64,
    pub ssim_mode: SsimMode,
    /// Patches per inference forward pass.
    pub infer_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_stride: TEST_STRIDE,
            threshold: DEFAULT_THRESHOLD,
            ssim_mode: SsimMode::Continuous,
            infer_batch: 16,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            threshold: self.threshold,
            ssim_mode: self.ssim_mode,
        }
    }

    pub fn infer_options(&self) -> InferOptions {
        InferOptions {
            stride: self.test_stride,
            batch_size: self.infer_batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetId,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub data: DataOptions,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub networks: NetworkSpecs,
    #[serde(default)]
    pub eval: EvalConfig,
}

/// Values given on the command line; `None` leaves the file value alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub dataset: Option<DatasetId>,
    pub data_root: Option<PathBuf>,
    pub work_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub epochs: Option<u64>,
    pub batch_size: Option<usize>,
    pub max_steps: Option<u64>,
    pub desk_scale: bool,
    pub test_stride: Option<usize>,
    pub threshold: Option<f64>,
}

impl RunConfig {
    pub fn new(dataset: DatasetId) -> Self {
        Self {
            dataset,
            paths: Paths::default(),
            data: DataOptions::default(),
            train: TrainConfig::default(),
            networks: NetworkSpecs::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = o.dataset {
            self.dataset = d;
        }
        if let Some(p) = &o.data_root {
            self.paths.data_root = p.clone();
        }
        if let Some(p) = &o.work_dir {
            self.paths.work_dir = p.clone();
        }
        if let Some(v) = o.seed {
            self.train.seed = v;
        }
        if let Some(v) = o.epochs {
            self.train.epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.train.batch_size = v;
        }
        if o.max_steps.is_some() {
            self.train.max_steps = o.max_steps;
        }
        if o.desk_scale {
            self.train.desk_scale = true;
        }
        if let Some(v) = o.test_stride {
            self.eval.test_stride = v;
        }
        if let Some(v) = o.threshold {
            self.eval.threshold = v;
        }
    }

    /// Desk-scale reductions folded into the train config and specs.
    pub fn resolved(&self) -> Self {
        let (train, networks) = self.train.resolve(&self.networks);
        Self {
            train,
            networks,
            ..self.clone()
        }
    }

    /// Check every section and their cross-constraints.
    pub fn validate(&self) -> Result<()> {
        let r = self.resolved();
        r.train.validate()?;
        r.networks.validate()?;
        let d = &r.data;
        if d.patch_size == 0 || d.train_stride == 0 {
            return Err(Error::Config("data.patch_size and data.train_stride must be >= 1".into()));
        }
        if d.folds < 2 {
            return Err(Error::Config("data.folds must be >= 2".into()));
        }
        if r.networks.g_fine.input_size != d.patch_size {
            return Err(Error::Config(format!(
                "fine generator input {} differs from data.patch_size {}",
                r.networks.g_fine.input_size, d.patch_size
            )));
        }
        let e = &r.eval;
        if e.test_stride == 0 || e.infer_batch == 0 {
            return Err(Error::Config("eval.test_stride and eval.infer_batch must be >= 1".into()));
        }
        if !(e.threshold > 0.0 && e.threshold < 1.0) {
            return Err(Error::Config(format!("eval.threshold {} is outside (0, 1)", e.threshold)));
        }
        Ok(())
    }

    /// Name of the run directory: dataset, fold and a hash of everything that
    /// shapes training. Paths, evaluation options and the step cap do not
    /// enter the hash, so a capped run can later be extended in place.
    pub fn run_stamp(&self, fold: usize) -> Result<String> {
        let mut r = self.resolved();
        r.train.max_steps = None;
        let key = serde_json::to_vec(&(r.dataset, r.data, r.train, r.networks))?;
        Ok(format!(
            "{}-fold{fold}-{:08x}",
            r.dataset.name().to_ascii_lowercase(),
            content_hash(&key) as u32
        ))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.work_dir.join("cache")
    }

    pub fn cache_path(&self) -> PathBuf {
        self.cache_dir().join(format!(
            "{}-p{}-s{}.vgpatch",
            self.dataset.name().to_ascii_lowercase(),
            self.data.patch_size,
            self.data.train_stride
        ))
    }

    pub fn folds_path(&self) -> PathBuf {
        self.cache_dir().join(format!(
            "{}-folds.json",
            self.dataset.name().to_ascii_lowercase()
        ))
    }

    pub fn run_dir(&self, fold: usize) -> Result<PathBuf> {
        Ok(self.paths.work_dir.join("runs").join(self.run_stamp(fold)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let c = RunConfig::from_toml("dataset = \"DRIVE\"").unwrap();
        assert_eq!(c, RunConfig::new(DatasetId::Drive));
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("dataset = \"DRIVE\"\nlearning_rate = 1").is_err());
        assert!(RunConfig::from_toml("dataset = \"DRIVE\"\n[train]\nlr = 1e-3\nmomentum = 0.9").is_err());
    }

    #[test]
    fn whole_config_validation() {
        let mut c = RunConfig::new(DatasetId::Stare);
        c.eval.threshold = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::new(DatasetId::Stare);
        c.data.patch_size = 64;
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_and_stamp() {
        let mut c = RunConfig::new(DatasetId::ChaseDb1);
        let stamp = c.run_stamp(0).unwrap();
        assert!(stamp.starts_with("chase_db1-fold0-"));
        c.apply(&Overrides {
            seed: Some(9),
            threshold: Some(0.7),
            ..Overrides::default()
        });
        assert_eq!((c.train.seed, c.eval.threshold), (9, 0.7));
        assert_ne!(c.run_stamp(0).unwrap(), stamp);
        let mut d = c.clone();
        d.eval.threshold = 0.6;
        assert_eq!(d.run_stamp(0).unwrap(), c.run_stamp(0).unwrap());
    }
}

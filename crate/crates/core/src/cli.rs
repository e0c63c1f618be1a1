//! Command-line front end: prepare, train, infer, evaluate, plot.
//!
//! Every command reads one [`RunConfig`], applies flag overrides, validates
//! the result and writes below `work_dir`: patch caches and fold manifests in
//! `cache/`, everything else in `runs/<stamp>/`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, RunConfig};
use crate::data::{load_split, make_folds, DatasetId, FoldSplit, PatchCache, PatchGrid, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_image, pooled_roc, render_roc, write_overlay, EvalReport, ImageMetrics, RocCurve, REPORT_JSON, ROC_CSV, ROC_PNG};
use crate::infer::{load_generators, predict_image, read_raw_map, write_confidence_png, write_raw_map};
use crate::training::{latest_checkpoint, train, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

pub const PREDICTIONS_DIR: &str = "predictions";
pub const EVAL_DIR: &str = "eval";
pub const FIGURES_DIR: &str = "figures";
pub const TIMING_CSV: &str = "timing.csv";

#[derive(Debug, Parser)]
#[command(name = "vesselgan", version, about = "Multi-scale adversarial retinal vessel segmentation")]
pub struct Cli {
    /// TOML run configuration. Without it `--dataset` is required and every
    /// other value takes its default.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,

    /// Print the fully resolved configuration before running.
    #[arg(long, global = true)]
    pub print_config: bool,

    /// Worker threads for tensor kernels (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    #[command(flatten)]
    pub overrides: OverrideArgs,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Default, Args)]
pub struct OverrideArgs {
    #[arg(long, global = true, value_parser = parse_dataset)]
    pub dataset: Option<DatasetId>,
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epochs: Option<u64>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub max_steps: Option<u64>,
    /// Shrink every network to 16 base channels and train one epoch.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    /// Stride of the inference patch grid.
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

fn parse_dataset(s: &str) -> std::result::Result<DatasetId, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl OverrideArgs {
    fn to_overrides(&self) -> Overrides {
        Overrides {
            dataset: self.dataset,
            data_root: self.data_root.clone(),
            work_dir: self.work_dir.clone(),
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            desk_scale: self.desk_scale,
            test_stride: self.stride,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut training patches into the cache and write the fold manifest.
    Prepare,
    /// Train on one cross-validation fold.
    Train {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Predict confidence maps for the test images.
    Infer {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Checkpoint directory (default: the run's latest).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only the first N test images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score predictions against ground truth.
    Evaluate {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Directory of `<image_id>.safetensors` maps (default: the run's).
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Render the ROC curve and segmentation overlays of an evaluated run.
    Plot {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Eval(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Tensor(_) => EXIT_NUMERIC,
        Error::MissingFiles(_)
        | Error::Io { .. }
        | Error::Image { .. }
        | Error::Checkpoint { .. }
        | Error::Data(_)
        | Error::Json(_) => EXIT_IO,
    }
}

/// Parse `args`, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be >= 1");
            return EXIT_USAGE;
        }
        // read once by the kernel thread pool, which has not started yet
        std::env::set_var("RAYON_NUM_THREADS", n.to_string());
    }
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Load, override and validate the configuration of `cli`.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.overrides.dataset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(ds)) => RunConfig::new(ds),
        (None, None) => return Err(Error::Config("pass --config or --dataset".into())),
    };
    cfg.apply(&cli.overrides.to_overrides());
    cfg.validate()?;
    Ok(cfg.resolved())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml()?);
    }
    let device = Device::Cpu;
    match &cli.command {
        None if cli.print_config => Ok(()),
        None => Err(Error::Config("no command given; see --help".into())),
        Some(Command::Prepare) => cmd_prepare(&cfg).map(|s| print!("{s}")),
        Some(Command::Train { fold, resume }) => cmd_train(&cfg, *fold, *resume, &device),
        Some(Command::Infer {
            fold,
            checkpoint,
            limit,
        }) => cmd_infer(&cfg, *fold, checkpoint.as_deref(), *limit, &device),
        Some(Command::Evaluate { fold, predictions }) => {
            let report = cmd_evaluate(&cfg, *fold, predictions.as_deref())?;
            println!("{}", ImageMetrics::CSV_HEADER);
            println!("{}", report.mean.csv_row());
            println!("pooled AUC {:.4}", report.pooled_auc);
            Ok(())
        }
        Some(Command::Plot { fold, predictions }) => cmd_plot(&cfg, *fold, predictions.as_deref()),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Build the patch cache and fold manifest; returns the patch-count table.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<String> {
    let records = load_split(&cfg.paths.data_root, cfg.dataset, Split::Train)?;
    let cache = PatchCache::build(cfg.dataset, &records, cfg.data.patch_size, cfg.data.train_stride)?;
    create_dir(&cfg.cache_dir())?;
    let path = cfg.cache_path();
    cache.save(&path)?;
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let ids: Vec<&str> = cache.image_ids();
    let folds = make_folds(&ids, cfg.data.folds, cfg.data.fold_seed)?;
    let folds_path = cfg.folds_path();
    write_text(&folds_path, &serde_json::to_string_pretty(&folds)?)?;

    let mut table = String::new();
    writeln!(table, "{:<10} {:>6} {:>10} {:>8}", "dataset", "images", "per_image", "total").unwrap();
    let (w, h) = cfg.dataset.image_dims();
    let per = PatchGrid::new(h, w, cfg.data.patch_size, cfg.data.train_stride)?.len();
    writeln!(
        table,
        "{:<10} {:>6} {:>10} {:>8}",
        cfg.dataset.name(),
        records.len(),
        per,
        cache.total_patches()
    )
    .unwrap();
    writeln!(table, "cache {} ({:016x})", path.display(), crate::data::content_hash(&bytes)).unwrap();
    writeln!(table, "folds {}", folds_path.display()).unwrap();
    Ok(table)
}

fn load_folds(cfg: &RunConfig) -> Result<Vec<FoldSplit>> {
    let path = cfg.folds_path();
    if !path.exists() {
        return Err(Error::MissingFiles(format!(
            "{} not found; run `prepare` first",
            path.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn cmd_train(cfg: &RunConfig, fold: usize, resume: bool, device: &Device) -> Result<()> {
    let folds = load_folds(cfg)?;
    let split = folds.get(fold).ok_or_else(|| {
        Error::Config(format!("fold {fold} is out of range (0..{})", folds.len()))
    })?;
    let cache_path = cfg.cache_path();
    if !cache_path.exists() {
        return Err(Error::MissingFiles(format!(
            "{} not found; run `prepare` first",
            cache_path.display()
        )));
    }
    let cache = PatchCache::load(&cache_path)?;
    if cache.dataset != cfg.dataset {
        return Err(Error::Data(format!(
            "cache holds {} patches but the config names {}",
            cache.dataset, cfg.dataset
        )));
    }
    let patches = cache.select(&split.train_ids)?;
    let run_dir = cfg.run_dir(fold)?;
    create_dir(&run_dir)?;
    write_text(&run_dir.join("config.toml"), &cfg.to_toml()?)?;
    let state = if resume {
        let dir = latest_checkpoint(&run_dir)?.ok_or_else(|| {
            Error::MissingFiles(format!("no checkpoint to resume under {}", run_dir.display()))
        })?;
        let mut s = TrainState::load(&dir, &cfg.networks, device)?;
        s.config.max_steps = cfg.train.max_steps;
        s
    } else {
        TrainState::new(cfg.train, &cfg.networks, device)?
    };
    println!(
        "training {} fold {fold}: {} patches, run {}",
        cfg.dataset,
        patches.len(),
        run_dir.display()
    );
    let out = train(state, &patches, &run_dir, device)?;
    if let Some(last) = out.losses.last() {
        println!(
            "finished at step {}: total_g {:.4} total_d {:.4} rec {:.4}",
            out.state.step, last.total_g, last.total_d, last.rec
        );
    }
    for c in &out.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

pub fn cmd_infer(cfg: &RunConfig, fold: usize, checkpoint: Option<&Path>, limit: Option<usize>, device: &Device) -> Result<()> {
    let run_dir = cfg.run_dir(fold)?;
    let ckpt = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&run_dir)?.ok_or_else(|| {
            Error::MissingFiles(format!("no checkpoint under {}; train first", run_dir.display()))
        })?,
    };
    let generators = load_generators(&ckpt, &cfg.networks, device)?;
    let mut records = load_split(&cfg.paths.data_root, cfg.dataset, Split::Test)?;
    if let Some(n) = limit {
        records.truncate(n);
    }
    let out_dir = run_dir.join(PREDICTIONS_DIR);
    create_dir(&out_dir)?;
    let opts = cfg.eval.infer_options();
    let mut timing = String::from("image_id,patches,seconds\n");
    for rec in &records {
        let p = predict_image(&generators, rec, &opts, device)?;
        write_confidence_png(&out_dir.join(format!("{}.png", p.image_id)), &p.confidence)?;
        write_raw_map(&out_dir.join(format!("{}.safetensors", p.image_id)), &p.image_id, &p.confidence)?;
        writeln!(timing, "{},{},{:.4}", p.image_id, p.patches, p.seconds).unwrap();
        println!("{}: {} patches at stride {} in {:.3}s", p.image_id, p.patches, opts.stride, p.seconds);
    }
    write_text(&out_dir.join(TIMING_CSV), &timing)
}

/// Load one map per record from `dir`, listing every missing id at once.
fn load_predictions(dir: &Path, ids: &[&str]) -> Result<Vec<ndarray::Array2<f32>>> {
    let missing: Vec<&str> = ids
        .iter()
        .copied()
        .filter(|id| !dir.join(format!("{id}.safetensors")).exists())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(format!(
            "no prediction in {} for: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    ids.iter()
        .map(|id| {
            let path = dir.join(format!("{id}.safetensors"));
            let (stored, map) = read_raw_map(&path)?;
            if stored != *id {
                return Err(Error::Data(format!("{} holds image {stored}", path.display())));
            }
            Ok(map)
        })
        .collect()
}

pub fn cmd_evaluate(cfg: &RunConfig, fold: usize, predictions: Option<&Path>) -> Result<EvalReport> {
    let run_dir = cfg.run_dir(fold)?;
    let pred_dir = predictions.map_or_else(|| run_dir.join(PREDICTIONS_DIR), Path::to_path_buf);
    let records = load_split(&cfg.paths.data_root, cfg.dataset, Split::Test)?;
    let ids: Vec<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let maps = load_predictions(&pred_dir, &ids)?;
    let opts = cfg.eval.options();
    let rows = maps
        .iter()
        .zip(&records)
        .map(|(m, r)| evaluate_image(m, r, &opts))
        .collect::<Result<Vec<_>>>()?;
    let roc = pooled_roc(maps.iter().zip(&records))?;
    let report = EvalReport::new(cfg.dataset.name(), opts, rows, roc)?;
    let dir = run_dir.join(EVAL_DIR);
    report.write(&dir)?;
    let roc = report.roc.as_ref().expect("fresh report");
    write_text(&dir.join(ROC_CSV), &roc.to_csv())?;
    Ok(report)
}

pub fn cmd_plot(cfg: &RunConfig, fold: usize, predictions: Option<&Path>) -> Result<()> {
    let run_dir = cfg.run_dir(fold)?;
    let eval_dir = run_dir.join(EVAL_DIR);
    let (report_path, roc_path) = (eval_dir.join(REPORT_JSON), eval_dir.join(ROC_CSV));
    if !report_path.exists() || !roc_path.exists() {
        return Err(Error::MissingFiles(format!(
            "no evaluation under {}; run `evaluate` first",
            eval_dir.display()
        )));
    }
    let report = EvalReport::load_json(&report_path)?;
    let text = fs::read_to_string(&roc_path).map_err(|e| Error::io(&roc_path, e))?;
    let roc = RocCurve::from_csv(&text)?;
    let fig_dir = run_dir.join(FIGURES_DIR);
    let overlay_dir = fig_dir.join("overlays");
    create_dir(&overlay_dir)?;
    let png = fig_dir.join(ROC_PNG);
    render_roc(&roc).save(&png).map_err(|e| Error::image(&png, e))?;
    println!("{}", png.display());

    let pred_dir = predictions.map_or_else(|| run_dir.join(PREDICTIONS_DIR), Path::to_path_buf);
    let records = load_split(&cfg.paths.data_root, cfg.dataset, Split::Test)?;
    let evaluated: Vec<&str> = report.images.iter().map(|m| m.image_id.as_str()).collect();
    let maps = load_predictions(&pred_dir, &evaluated)?;
    for (id, map) in evaluated.iter().zip(&maps) {
        let rec = records
            .iter()
            .find(|r| r.image_id == *id)
            .ok_or_else(|| Error::Data(format!("evaluated image {id} is not in the test split")))?;
        let path = overlay_dir.join(format!("{id}.png"));
        write_overlay(&path, rec, map, report.options.threshold)?;
        println!("{}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["vesselgan", "--bogus"]), EXIT_USAGE);
        assert_eq!(main_with_args(["vesselgan", "prepare"]), EXIT_USAGE);
        assert_eq!(main_with_args(["vesselgan", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_root_exits_with_io_code() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("absent");
        let code = main_with_args([
            "vesselgan".into(),
            "--dataset".into(),
            "STARE".into(),
            "--data-root".into(),
            root.into_os_string(),
            "--work-dir".into(),
            dir.path().as_os_str().to_owned(),
            "prepare".into(),
        ]);
        assert_eq!(code, EXIT_IO);
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::NonFinite { step: 1, detail: String::new() }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Config(String::new())), EXIT_USAGE);
        assert_eq!(exit_code(&Error::MissingFiles(String::new())), EXIT_IO);
    }
}

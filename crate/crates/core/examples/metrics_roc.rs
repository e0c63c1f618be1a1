//! Score a noisy confidence map against a phantom's vessel map and write the
//! report and ROC artifacts.
//!
//! cargo run --example metrics_roc -- [out_dir]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselgan::data::vessel_phantom;
use vesselgan::eval::{emit_roc_artifacts, evaluate_image, pooled_roc, EvalOptions, EvalReport};

fn main() -> vesselgan::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "metrics_out".into());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let opts = EvalOptions::default();
    let records: Vec<_> = (0..3).map(|s| vessel_phantom(96, s)).collect::<vesselgan::Result<_>>()?;
    let maps: Vec<_> = records
        .iter()
        .map(|r| r.vessel_gt.mapv(|g| (0.35 * f32::from(g) + rng.random_range(0.0..0.65)).min(1.0)))
        .collect();
    let rows = records
        .iter()
        .zip(&maps)
        .map(|(r, m)| evaluate_image(m, r, &opts))
        .collect::<vesselgan::Result<Vec<_>>>()?;
    let roc = pooled_roc(maps.iter().zip(&records))?;
    let report = EvalReport::new("phantoms", opts, rows, roc)?;
    print!("{}", report.to_csv());
    println!("pooled AUC {:.4}", report.pooled_auc);
    let (csv, json) = report.write(std::path::Path::new(&out))?;
    let roc = emit_roc_artifacts(&report, std::path::Path::new(&out))?;
    println!("wrote {}, {}, {}, {}", csv.display(), json.display(), roc.csv.display(), roc.png.display());
    Ok(())
}

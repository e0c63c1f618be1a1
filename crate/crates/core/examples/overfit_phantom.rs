//! Overfit the desk-scale model on one synthetic vessel phantom and report
//! Dice on that pair as training proceeds.
//!
//! cargo run --release --example overfit_phantom -- [steps]

use std::time::Instant;

use candle_core::Device;
use vesselgan::data::{extract_patches, vessel_phantom, PATCH_SIZE};
use vesselgan::nn::Pass;
use vesselgan::training::{train_step, Batch, NetworkSpecs, TrainConfig, TrainState};

fn dice(pred: &[f32], gt: &[f32]) -> f64 {
    let (mut inter, mut p, mut g) = (0.0, 0.0, 0.0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (f64::from(u8::from(a > 0.0)), f64::from(u8::from(b > 0.0)));
        inter += a * b;
        p += a;
        g += b;
    }
    2.0 * inter / (p + g)
}

fn main() -> vesselgan::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let device = Device::Cpu;
    let record = vessel_phantom(PATCH_SIZE, 7)?;
    let (set, _) = extract_patches(&record, PATCH_SIZE, PATCH_SIZE)?;
    let batch = Batch::from_patches(&[&set.patches[0]], &device)?;
    let cfg = TrainConfig { batch_size: 1, seed: 1, ..TrainConfig::default() };
    let mut state = TrainState::new(cfg, &NetworkSpecs::default().desk(), &device)?;
    let gt: Vec<f32> = batch.y.flatten_all()?.to_vec1()?;
    let start = Instant::now();
    for _ in 0..steps {
        let loss = train_step(&mut state, &batch)?;
        state.step += 1;
        if state.step % 10 == 0 || state.step == 1 {
            let mut scores = Vec::new();
            for pass in [Pass::EVAL, Pass::FROZEN] {
                let out = state.gan.generators.forward_cascade(&batch.x, pass)?;
                let pred: Vec<f32> = out.fine.seg_map.flatten_all()?.to_vec1()?;
                scores.push(dice(&pred, &gt));
            }
            println!(
                "step {:4}  rec {:.4}  adv_d {:.3}  dice(eval) {:.3}  dice(batch-stats) {:.3}  {:.1}s",
                state.step,
                loss.rec,
                loss.adv_d,
                scores[0],
                scores[1],
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}

//! Train a few steps, stop, resume from the checkpoint and confirm the
//! resumed run lands where an uninterrupted one does.
//!
//! cargo run --release --example checkpoint_resume

use candle_core::Device;
use vesselgan::data::{extract_patches, vessel_phantom, Patch};
use vesselgan::training::{latest_checkpoint, train, NetworkSpecs, TrainConfig, TrainState};

fn main() -> vesselgan::Result<()> {
    let dev = Device::Cpu;
    let specs = NetworkSpecs::default().desk();
    let (set, _) = extract_patches(&vessel_phantom(192, 3)?, 128, 32)?;
    let patches: Vec<&Patch> = set.patches.iter().collect();
    let cfg = |steps| TrainConfig { batch_size: 2, checkpoint_every: 2, max_steps: Some(steps), ..TrainConfig::default() };
    let dir = std::env::temp_dir().join("vesselgan-checkpoint-example");
    let _ = std::fs::remove_dir_all(&dir);

    let straight = train(TrainState::new(cfg(4), &specs, &dev)?, &patches, &dir.join("straight"), &dev)?;
    train(TrainState::new(cfg(2), &specs, &dev)?, &patches, &dir.join("split"), &dev)?;
    let ckpt = latest_checkpoint(&dir.join("split"))?.expect("a checkpoint was written");
    let mut state = TrainState::load(&ckpt, &specs, &dev)?;
    println!("resuming from {} at step {}", ckpt.display(), state.step);
    state.config.max_steps = Some(4);
    let resumed = train(state, &patches, &dir.join("split"), &dev)?;

    let (a, b) = (straight.losses.last().unwrap(), resumed.losses.last().unwrap());
    println!("step 4 generator total: uninterrupted {:.6}, resumed {:.6}", a.total_g, b.total_g);
    let (pa, pb) = (straight.state.gan.snapshot()?, resumed.state.gan.snapshot()?);
    let drift = pa
        .values()
        .zip(pb.values())
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max);
    println!("largest parameter difference {drift:e}");
    Ok(())
}

//! Sliding-window inference: predict a phantom larger than one patch with
//! untrained desk-scale generators, then write the confidence map. Freshly
//! initialized weights put every pixel close to 0.5.
//!
//! cargo run --release --example predict_phantom -- [stride]

use candle_core::{DType, Device};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselgan::data::vessel_phantom;
use vesselgan::generators::{GeneratorPair, GeneratorSpec};
use vesselgan::infer::{predict_image, write_confidence_png, InferOptions};

fn main() -> vesselgan::Result<()> {
    let stride: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pair = GeneratorPair::new(GeneratorSpec::coarse().desk(), GeneratorSpec::fine().desk(), DType::F32, &dev, &mut rng)?;
    let record = vessel_phantom(200, 1)?;
    let pred = predict_image(&pair, &record, &InferOptions { stride, batch_size: 8 }, &dev)?;
    let (lo, hi) = pred.confidence.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    println!(
        "{}: {} patches at stride {stride} in {:.2} s, confidence in [{lo:.5}, {hi:.5}]",
        pred.image_id, pred.patches, pred.seconds
    );
    let out = std::path::Path::new("prediction.png");
    write_confidence_png(out, &pred.confidence)?;
    println!("wrote {}", out.display());
    Ok(())
}

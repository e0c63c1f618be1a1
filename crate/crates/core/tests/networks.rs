//! Generator and discriminator contracts on small random networks.

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vesselgan::discriminators::{build_discriminator, DiscriminatorSpec};
use vesselgan::generators::{GeneratorPair, GeneratorSpec};
use vesselgan::nn::Pass;

fn pair(seed: u64) -> GeneratorPair {
    let g = |spec: GeneratorSpec, size| GeneratorSpec { base_channels: 4, input_size: size, ..spec };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GeneratorPair::new(g(GeneratorSpec::coarse(), 16), g(GeneratorSpec::fine(), 32), DType::F32, &Device::Cpu, &mut rng)
        .unwrap()
}

fn input(v: Vec<f32>, channels: usize, size: usize) -> Tensor {
    Tensor::from_vec(v, (1, channels, size, size), &Device::Cpu).unwrap()
}

/// Seeded uniform values in [-1, 1].
fn noise(batch: usize, channels: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..batch * channels * size * size).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Tensor::from_vec(v, (batch, channels, size, size), &Device::Cpu).unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cascade_output_stays_in_range_and_is_deterministic(
        seed in 0u64..1000,
        x in prop::collection::vec(-1.0f32..=1.0, 3 * 32 * 32),
    ) {
        let g = pair(seed);
        let x = input(x, 3, 32);
        let a = g.forward_cascade(&x, Pass::EVAL).unwrap();
        let b = g.forward_cascade(&x, Pass::EVAL).unwrap();
        for out in [&a.coarse.seg_map, &a.fine.seg_map] {
            let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            prop_assert!(v.iter().all(|p| (-1.0..=1.0).contains(p)));
        }
        prop_assert_eq!(a.fine.seg_map.dims(), &[1, 1, 32, 32]);
        prop_assert_eq!(a.coarse.seg_map.dims(), &[1, 1, 16, 16]);
        prop_assert_eq!(bits(&a.fine.seg_map), bits(&b.fine.seg_map));
        prop_assert_eq!(bits(&a.coarse.handoff), bits(&b.coarse.handoff));
    }

    #[test]
    fn discriminator_is_pixel_level_and_deterministic(
        seed in 0u64..1000,
        x in prop::collection::vec(-1.0f32..=1.0, 3 * 32 * 32),
        y in prop::collection::vec(-1.0f32..=1.0, 32 * 32),
    ) {
        let spec = DiscriminatorSpec { base_channels: 4, input_size: 32, ..DiscriminatorSpec::fine() };
        let d = build_discriminator(spec, DType::F32, &Device::Cpu, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (x, y) = (input(x, 3, 32), input(y, 1, 32));
        let (l1, t1) = d.forward_with_taps(&x, &y, Pass::EVAL).unwrap();
        let (l2, t2) = d.forward_with_taps(&x, &y, Pass::EVAL).unwrap();
        prop_assert_eq!(l1.dims(), &[1, 1, 32, 32]);
        prop_assert_eq!(bits(&l1), bits(&l2));
        for (a, b) in t1.enc.iter().chain(&t1.dec).zip(t2.enc.iter().chain(&t2.dec)) {
            prop_assert_eq!(bits(a), bits(b));
        }
        // a different segmentation map changes the taps
        let (_, t3) = d.forward_with_taps(&x, &y.neg().unwrap(), Pass::EVAL).unwrap();
        prop_assert_ne!(bits(&t1.enc[0]), bits(&t3.enc[0]));
    }
}

#[test]
fn fine_map_gradient_reaches_the_coarse_generator() {
    let g = pair(5);
    let x = noise(2, 3, 32, 9);
    let out = g.forward_cascade(&x, Pass::TRAIN).unwrap();
    let grads = out.fine.seg_map.mean_all().unwrap().backward().unwrap();
    let reached = g
        .coarse
        .params()
        .params()
        .values()
        .filter_map(|v| grads.get(v.as_tensor()))
        .any(|t| t.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap() > 0.0);
    assert!(reached, "no coarse generator parameter received gradient from the fine map");
}

#[test]
fn zeroed_discriminator_emits_zero_logits() {
    let spec = DiscriminatorSpec { base_channels: 4, input_size: 32, ..DiscriminatorSpec::fine() };
    let d = build_discriminator(spec, DType::F32, &Device::Cpu, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    d.params().zero_all().unwrap();
    let x = noise(2, 3, 32, 9);
    let y = Tensor::ones((2, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
    for pass in [Pass::EVAL, Pass::TRAIN] {
        let logits = d.forward(&x, &y, pass).unwrap();
        assert_eq!(logits.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }
}

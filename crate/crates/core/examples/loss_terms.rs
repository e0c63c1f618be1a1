//! Evaluate each loss term on small hand-built tensors and combine them into
//! the weighted objective.
//!
//! cargo run --example loss_terms

use candle_core::{Device, Tensor};
use vesselgan::discriminators::FeatureTaps;
use vesselgan::losses::{
    composite, feature_matching, hinge_d, hinge_g, reconstruction, scalar, weighted_feature_matching, LossWeights,
    ScaleLosses,
};

fn full(v: f64, shape: &[usize]) -> vesselgan::Result<Tensor> {
    Ok(Tensor::full(v, shape, &Device::Cpu)?)
}

fn main() -> vesselgan::Result<()> {
    let s = [1, 2, 4, 4];
    let w = LossWeights::default();

    let real = FeatureTaps { enc: vec![full(1.0, &s)?, full(2.0, &s)?], dec: vec![full(0.5, &s)?, full(0.0, &s)?] };
    let fake = FeatureTaps { enc: vec![full(0.0, &s)?, full(2.0, &s)?], dec: vec![full(0.5, &s)?, full(1.0, &s)?] };
    let fm = scalar(&feature_matching(&real.enc, &fake.enc)?)?;
    let wfm = scalar(&weighted_feature_matching(&real, &fake, &w)?)?;
    println!("feature matching over encoder taps       {fm:.4}");
    println!("weighted (enc {:.1}, dec {:.1})             {wfm:.4}", w.lambda_enc, w.lambda_dec);

    let d = scalar(&hinge_d(&full(0.5, &[1, 1, 4, 4])?, &full(-0.2, &[1, 1, 4, 4])?)?)?;
    let g = scalar(&hinge_g(&full(-0.2, &[1, 1, 4, 4])?)?)?;
    let rec = scalar(&reconstruction(&full(0.8, &[1, 1, 4, 4])?, &full(1.0, &[1, 1, 4, 4])?)?)?;
    println!("hinge (discriminator)                    {d:.4}");
    println!("hinge (generator)                        {g:.4}");
    println!("reconstruction                           {rec:.4}");

    let parts = [ScaleLosses::new(d, g, rec, wfm), ScaleLosses::new(d, g, rec, wfm)];
    let out = composite(&parts, &w)?;
    println!("two scales: generator total {:.4}, discriminator total {:.4}", out.total_g, out.total_d);
    Ok(())
}

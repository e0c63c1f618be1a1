//! Adversarial, reconstruction and (weighted) feature-matching objectives.
//!
//! Every loss is a differentiable scalar `Tensor` so it can be fed straight
//! into `backward`. Feature distances are L1 with a mean over each tap's
//! elements, which keeps taps of different sizes on the same scale.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::discriminators::FeatureTaps;
use crate::error::{Error, Result};
use crate::nn::relu;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_enc: f64,
    pub lambda_dec: f64,
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    pub lambda_wfm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_enc: 0.4,
            lambda_dec: 0.6,
            lambda_adv: 10.0,
            lambda_rec: 10.0,
            lambda_wfm: 10.0,
        }
    }
}

impl LossWeights {
    /// Encoder/decoder weights must lie in [0, 1], sum to one, and favour the
    /// decoder.
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.lambda_enc) || !in_unit(self.lambda_dec) {
            return Err(Error::Config("lambda_enc and lambda_dec must lie in [0, 1]".into()));
        }
        if (self.lambda_enc + self.lambda_dec - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "lambda_enc + lambda_dec must equal 1, got {}",
                self.lambda_enc + self.lambda_dec
            )));
        }
        if self.lambda_dec <= self.lambda_enc {
            return Err(Error::Config("lambda_dec must exceed lambda_enc".into()));
        }
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_rec", self.lambda_rec),
            ("lambda_wfm", self.lambda_wfm),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute elementwise difference.
pub fn mean_abs_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "feature tap shapes differ")?;
    Ok((a - b)?.abs()?.mean_all()?)
}

fn tap_sum(real: &[Tensor], fake: &[Tensor], per_tap: f64) -> Result<Tensor> {
    if real.len() != fake.len() {
        return Err(Error::Shape(format!(
            "tap counts differ: {} vs {}",
            real.len(),
            fake.len()
        )));
    }
    let mut acc: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let term = mean_abs_diff(r, f)?.affine(per_tap, 0.0)?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::Shape("no feature taps to compare".into()))
}

/// Plain feature matching over encoder taps: the mean over taps of each
/// tap's mean absolute difference.
pub fn feature_matching(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    let k = real.len().max(1) as f64;
    tap_sum(real, fake, 1.0 / k)
}

/// Weighted feature matching: encoder taps share `lambda_enc`, decoder taps
/// share `lambda_dec`, each split uniformly across its taps.
pub fn weighted_feature_matching(real: &FeatureTaps, fake: &FeatureTaps, w: &LossWeights) -> Result<Tensor> {
    let k_enc = real.enc.len().max(1) as f64;
    let k_dec = real.dec.len().max(1) as f64;
    let enc = tap_sum(&real.enc, &fake.enc, w.lambda_enc / k_enc)?;
    let dec = tap_sum(&real.dec, &fake.dec, w.lambda_dec / k_dec)?;
    Ok((enc + dec)?)
}

/// Discriminator hinge loss
/// `-E[min(0, -1 + D(x, y))] - E[min(0, -1 - D(x, G(x)))]`.
///
/// Written with `relu`, so the subgradient exactly at the margin is 0.
pub fn hinge_d(logits_real: &Tensor, logits_fake: &Tensor) -> Result<Tensor> {
    same_shape(logits_real, logits_fake, "logit maps differ")?;
    let real = relu(&logits_real.neg()?.affine(1.0, 1.0)?)?.mean_all()?;
    let fake = relu(&logits_fake.affine(1.0, 1.0)?)?.mean_all()?;
    Ok((real + fake)?)
}

/// Generator hinge loss `-E[D(x, G(x))]`.
pub fn hinge_g(logits_fake: &Tensor) -> Result<Tensor> {
    Ok(logits_fake.mean_all()?.neg()?)
}

/// Mean squared error between a generated map and its target.
pub fn reconstruction(g_out: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape(g_out, y, "reconstruction operands differ")?;
    Ok((g_out - y)?.sqr()?.mean_all()?)
}

/// Weighted generator objective for one scale. `rec = None` drops the
/// reconstruction term from the graph entirely.
pub fn generator_objective(
    hinge_g: &Tensor,
    rec: Option<&Tensor>,
    wfm: &Tensor,
    w: &LossWeights,
) -> Result<Tensor> {
    let mut total = (hinge_g.affine(w.lambda_adv, 0.0)? + wfm.affine(w.lambda_wfm, 0.0)?)?;
    if let Some(rec) = rec {
        total = (total + rec.affine(w.lambda_rec, 0.0)?)?;
    }
    Ok(total)
}

/// Loss values of one (generator, discriminator) scale.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScaleLosses {
    pub hinge_d: Option<f64>,
    pub hinge_g: Option<f64>,
    pub rec: Option<f64>,
    pub wfm: Option<f64>,
}

impl ScaleLosses {
    pub fn new(hinge_d: f64, hinge_g: f64, rec: f64, wfm: f64) -> Self {
        Self {
            hinge_d: Some(hinge_d),
            hinge_g: Some(hinge_g),
            rec: Some(rec),
            wfm: Some(wfm),
        }
    }
}

/// Per-step loss summary, each part summed over scales.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_d: f64,
    pub adv_g: f64,
    pub rec: f64,
    pub wfm: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossBreakdown {
    /// Full objective: discriminator hinge plus the weighted generator terms.
    pub fn total(&self) -> f64 {
        self.total_d + self.total_g
    }

    pub fn is_finite(&self) -> bool {
        [self.adv_d, self.adv_g, self.rec, self.wfm, self.total_g, self.total_d]
            .iter()
            .all(|v| v.is_finite())
    }

    pub const CSV_HEADER: &'static str = "step,adv_d,adv_g,rec,wfm,total_g,total_d";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.adv_d, self.adv_g, self.rec, self.wfm, self.total_g, self.total_d
        )
    }
}

/// Combine per-scale parts into the weighted objective.
pub fn composite(parts: &[ScaleLosses], w: &LossWeights) -> Result<LossBreakdown> {
    if parts.is_empty() {
        return Err(Error::Config("composite needs at least one scale".into()));
    }
    let mut out = LossBreakdown::default();
    for (i, p) in parts.iter().enumerate() {
        let get = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| Error::Config(format!("scale {i}: missing loss part `{name}`")))
        };
        out.adv_d += get(p.hinge_d, "hinge_d")?;
        out.adv_g += get(p.hinge_g, "hinge_g")?;
        out.rec += get(p.rec, "rec")?;
        out.wfm += get(p.wfm, "wfm")?;
    }
    out.total_g = w.lambda_adv * out.adv_g + w.lambda_rec * out.rec + w.lambda_wfm * out.wfm;
    out.total_d = out.adv_d;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn full(v: f64, shape: &[usize]) -> Tensor {
        (Tensor::ones(shape, DType::F64, &Device::Cpu).unwrap() * v).unwrap()
    }

    fn val(t: Tensor) -> f64 {
        scalar(&t).unwrap()
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights { lambda_enc: 0.6, lambda_dec: 0.4, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = LossWeights { lambda_enc: 0.3, lambda_dec: 0.6, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = full(0.0, &[1, 2, 4, 4]);
        let b = full(0.0, &[1, 2, 2, 2]);
        assert!(feature_matching(&[a.clone()], &[b.clone()]).is_err());
        assert!(feature_matching(&[a.clone()], &[]).is_err());
        assert!(reconstruction(&a, &b).is_err());
        assert!(hinge_d(&a, &b).is_err());
    }

    #[test]
    fn hinge_d_at_margin_has_zero_gradient() {
        let real = candle_core::Var::from_tensor(&full(1.0, &[1, 1, 2, 2])).unwrap();
        let fake = candle_core::Var::from_tensor(&full(-1.0, &[1, 1, 2, 2])).unwrap();
        let loss = hinge_d(real.as_tensor(), fake.as_tensor()).unwrap();
        assert_eq!(val(loss.clone()), 0.0);
        let grads = loss.backward().unwrap();
        for v in [&real, &fake] {
            let g = grads.get(v).unwrap();
            let m = val(g.abs().unwrap().max_all().unwrap());
            assert_eq!(m, 0.0);
        }
    }

    #[test]
    fn hinge_d_inside_margin_gradient() {
        let real = candle_core::Var::from_tensor(&full(0.0, &[1, 1, 1, 2])).unwrap();
        let fake = candle_core::Var::from_tensor(&full(0.0, &[1, 1, 1, 2])).unwrap();
        let loss = hinge_d(real.as_tensor(), fake.as_tensor()).unwrap();
        let grads = loss.backward().unwrap();
        let gr: Vec<f64> = grads.get(&real).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let gf: Vec<f64> = grads.get(&fake).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(gr, vec![-0.5, -0.5]);
        assert_eq!(gf, vec![0.5, 0.5]);
    }

    #[test]
    fn composite_requires_every_part() {
        let mut p = ScaleLosses::new(0.0, 0.0, 0.0, 0.0);
        p.wfm = None;
        assert!(composite(&[p], &LossWeights::default()).is_err());
        assert!(composite(&[], &LossWeights::default()).is_err());
    }

    #[test]
    fn tensor_objective_matches_scalar_composite() {
        let w = LossWeights::default();
        let g = generator_objective(&full(-0.5, &[]), Some(&full(0.25, &[])), &full(0.1, &[]), &w).unwrap();
        let c = composite(&[ScaleLosses::new(0.0, -0.5, 0.25, 0.1)], &w).unwrap();
        assert!((val(g) - c.total_g).abs() < 1e-12);
    }

    #[test]
    fn csv_row_layout() {
        let b = LossBreakdown { adv_d: 1.0, adv_g: 2.0, rec: 3.0, wfm: 4.0, total_g: 5.0, total_d: 6.0 };
        assert_eq!(b.csv_row(7), "7,1,2,3,4,5,6");
        assert_eq!(LossBreakdown::CSV_HEADER.split(',').count(), 7);
    }
}

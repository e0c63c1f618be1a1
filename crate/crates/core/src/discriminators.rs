//! Autoencoder discriminators emitting per-pixel real/fake logits.
//!
//! The image and the segmentation map are concatenated along channels and
//! pushed through `n_down` downsampling blocks, `n_res` residual blocks and
//! `n_up` upsampling blocks, then a 1x1 convolution produces one raw logit per
//! input pixel. The output of every down/up block is returned as a feature tap.

use candle_core::{DType, Device, Tensor};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    make_discriminator_residual_block, make_downsampling_block, make_upsampling_block, BlockConfig,
    DownsamplingBlock, ResidualBlock, TensorSpec, UpsamplingBlock,
};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore, Pass};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    pub n_down: usize,
    pub n_up: usize,
    pub n_res: usize,
    pub in_channels: usize,
    pub input_size: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl DiscriminatorSpec {
    pub fn fine() -> Self {
        Self {
            base_channels: 64,
            n_down: 2,
            n_up: 2,
            n_res: 1,
            in_channels: 4,
            input_size: 128,
            batch_norm: true,
        }
    }

    pub fn coarse() -> Self {
        Self {
            input_size: 64,
            ..Self::fine()
        }
    }

    pub fn desk(mut self) -> Self {
        self.base_channels = 16;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down != self.n_up {
            return Err(Error::Config(format!(
                "autoencoder discriminator needs n_down == n_up, got {} and {}",
                self.n_down, self.n_up
            )));
        }
        if self.n_down == 0 || self.base_channels == 0 || self.in_channels < 2 {
            return Err(Error::Config(
                "discriminator needs n_down >= 1, base_channels >= 1 and an image plus a map as input"
                    .into(),
            ));
        }
        let factor = 1usize << self.n_down;
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "discriminator input size {} is not divisible by {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    fn enc_width(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Output width of decoder stage `j`: mirrors the encoder and ends at
    /// `base_channels`.
    fn dec_width(&self, j: usize) -> usize {
        let level = self.n_up - 1 - j;
        self.base_channels << level.saturating_sub(1)
    }
}

/// Ordered intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    /// One entry per downsampling block, in forward order.
    pub enc: Vec<Tensor>,
    /// One entry per upsampling block, in forward order.
    pub dec: Vec<Tensor>,
}

impl FeatureTaps {
    pub fn k_enc(&self) -> usize {
        self.enc.len()
    }

    pub fn k_dec(&self) -> usize {
        self.dec.len()
    }

    pub fn detach(&self) -> FeatureTaps {
        FeatureTaps {
            enc: self.enc.iter().map(Tensor::detach).collect(),
            dec: self.dec.iter().map(Tensor::detach).collect(),
        }
    }
}

#[derive(Debug)]
pub struct Discriminator {
    spec: DiscriminatorSpec,
    store: ParamStore,
    down: Vec<DownsamplingBlock>,
    res: Vec<ResidualBlock>,
    up: Vec<UpsamplingBlock>,
    head: Conv2d,
}

pub fn build_discriminator(
    spec: DiscriminatorSpec,
    dtype: DType,
    device: &Device,
    rng: &mut dyn RngCore,
) -> Result<Discriminator> {
    spec.validate()?;
    let mut store = ParamStore::new(dtype, device.clone());
    let mut init = Init::new(&mut store, rng);
    let mut down = Vec::with_capacity(spec.n_down);
    for i in 0..spec.n_down {
        let c_in = if i == 0 { spec.in_channels } else { spec.enc_width(i - 1) };
        // No normalization straight on the raw input pair.
        let cfg = BlockConfig::downsampling(c_in, spec.enc_width(i)).with_batch_norm(i > 0 && spec.batch_norm);
        down.push(DownsamplingBlock::new(
            make_downsampling_block(&cfg)?,
            &mut init.sub(&format!("down{i}")),
        )?);
    }
    let deepest = spec.enc_width(spec.n_down - 1);
    let mut res = Vec::with_capacity(spec.n_res);
    for i in 0..spec.n_res {
        let cfg = BlockConfig::discriminator_residual(deepest).with_batch_norm(spec.batch_norm);
        res.push(ResidualBlock::new(
            make_discriminator_residual_block(&cfg)?,
            &mut init.sub(&format!("res{i}")),
        )?);
    }
    let mut up = Vec::with_capacity(spec.n_up);
    let mut c_in = deepest;
    for j in 0..spec.n_up {
        let c_out = spec.dec_width(j);
        let cfg = BlockConfig::upsampling(c_in, c_out).with_batch_norm(spec.batch_norm);
        up.push(UpsamplingBlock::new(
            make_upsampling_block(&cfg)?,
            &mut init.sub(&format!("up{j}")),
        )?);
        c_in = c_out;
    }
    let head = Conv2d::new(&mut init.sub("head"), c_in, 1, 1, 1, 1, 1, true)?;
    Ok(Discriminator {
        spec,
        store,
        down,
        res,
        up,
        head,
    })
}

impl Discriminator {
    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Expected tap shapes for a batch size, encoder first.
    pub fn tap_specs(&self, batch: usize) -> Result<(Vec<TensorSpec>, Vec<TensorSpec>)> {
        let s = &self.spec;
        let mut side = s.input_size;
        let mut enc = Vec::new();
        for i in 0..s.n_down {
            side = side.div_ceil(2);
            enc.push(TensorSpec::new(batch, s.enc_width(i), side, side)?);
        }
        let mut dec = Vec::new();
        for j in 0..s.n_up {
            side *= 2;
            dec.push(TensorSpec::new(batch, s.dec_width(j), side, side)?);
        }
        Ok((enc, dec))
    }

    /// Logit map for the pair `(x, y)` plus the encoder/decoder taps.
    pub fn forward_with_taps(&self, x: &Tensor, y: &Tensor, pass: Pass) -> Result<(Tensor, FeatureTaps)> {
        let xs = TensorSpec::of(x)?;
        let ys = TensorSpec::of(y)?;
        if !xs.same_spatial(&ys) || xs.batch != ys.batch {
            return Err(Error::Shape(format!(
                "image {xs} and segmentation map {ys} must share batch and spatial dims"
            )));
        }
        if xs.channels + ys.channels != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} input channels, got {} + {}",
                self.spec.in_channels, xs.channels, ys.channels
            )));
        }
        if xs.height != self.spec.input_size || xs.width != self.spec.input_size {
            return Err(Error::Shape(format!(
                "discriminator expects {n}x{n} inputs, got {xs}",
                n = self.spec.input_size
            )));
        }
        let mut h = Tensor::cat(&[x, y], 1)?;
        let mut enc = Vec::with_capacity(self.down.len());
        for block in &self.down {
            h = block.forward(&h, pass)?;
            enc.push(h.clone());
        }
        for block in &self.res {
            h = block.forward(&h, pass)?;
        }
        let mut dec = Vec::with_capacity(self.up.len());
        for block in &self.up {
            h = block.forward(&h, pass)?;
            dec.push(h.clone());
        }
        let logits = self.head.forward(&h, pass)?;
        Ok((logits, FeatureTaps { enc, dec }))
    }

    pub fn forward(&self, x: &Tensor, y: &Tensor, pass: Pass) -> Result<Tensor> {
        Ok(self.forward_with_taps(x, y, pass)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spec_validation() {
        assert!(DiscriminatorSpec { n_up: 3, ..DiscriminatorSpec::fine() }.validate().is_err());
        assert!(DiscriminatorSpec { input_size: 30, ..DiscriminatorSpec::fine() }.validate().is_err());
        assert!(DiscriminatorSpec::coarse().validate().is_ok());
    }

    #[test]
    fn default_tap_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = build_discriminator(DiscriminatorSpec::fine().desk(), DType::F32, &Device::Cpu, &mut rng).unwrap();
        let (enc, dec) = d.tap_specs(1).unwrap();
        let sides: Vec<usize> = enc.iter().chain(&dec).map(|s| s.height).collect();
        assert_eq!(sides, vec![64, 32, 64, 128]);
    }

    #[test]
    fn spatial_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DiscriminatorSpec { base_channels: 2, input_size: 16, ..DiscriminatorSpec::fine() };
        let d = build_discriminator(spec, DType::F32, &Device::Cpu, &mut rng).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let y = Tensor::zeros((1, 1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.forward_with_taps(&x, &y, Pass::EVAL), Err(Error::Shape(_))));
    }
}

//! Coarse and fine generators and the cascade that couples them.
//!
//! Both generators share one encoder/decoder skeleton:
//!
//! ```text
//! stem 7x7 -> n_down x downsampling -> n_res x residual -> n_down x (upsampling + SFA) -> 7x7 head -> tanh
//! ```
//!
//! Each decoder stage is merged with the encoder activation of the same
//! resolution through an SFA block. The coarse generator exposes its last
//! decoder activation as hand-off features; the fine generator upsamples them
//! 2x and adds them to its stem output.

use candle_core::{DType, Device, Tensor};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    make_downsampling_block, make_generator_residual_block, make_sfa_block_with,
    make_upsampling_block, BlockConfig, DownsamplingBlock, ResidualBlock, SfaBlock, TensorSpec,
    UpsamplingBlock, DEFAULT_LEAKY_SLOPE,
};
use crate::error::{Error, Result};
use crate::nn::{area_downsample, leaky_relu, Conv2d, Init, Norm, ParamStore, Pass};

pub const STEM_KERNEL: usize = 7;
pub const HEAD_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub base_channels: usize,
    pub n_down: usize,
    pub n_res: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_size: usize,
    #[serde(default = "default_true")]
    pub batch_norm: bool,
}

fn default_true() -> bool {
    true
}

impl GeneratorSpec {
    pub fn fine() -> Self {
        Self {
            base_channels: 64,
            n_down: 2,
            n_res: 3,
            in_channels: 3,
            out_channels: 1,
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

    /// Same topology with the narrow width used for CPU-scale runs.
    pub fn desk(mut self) -> Self {
        self.base_channels = 16;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("generator channel counts must be >= 1".into()));
        }
        if self.n_down == 0 {
            return Err(Error::Config("generator needs at least one downsampling stage".into()));
        }
        let factor = 1usize << self.n_down;
        if self.input_size == 0 || self.input_size % factor != 0 {
            return Err(Error::Config(format!(
                "generator input size {} is not divisible by 2^{} = {factor}",
                self.input_size, self.n_down
            )));
        }
        Ok(())
    }

    /// Width of encoder stage `i` (0 = stem).
    fn width(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

/// Check that a (coarse, fine) pair forms a valid cascade.
pub fn validate_pair(coarse: &GeneratorSpec, fine: &GeneratorSpec) -> Result<()> {
    coarse.validate()?;
    fine.validate()?;
    if fine.input_size != 2 * coarse.input_size {
        return Err(Error::Config(format!(
            "fine input size {} must be twice the coarse input size {}",
            fine.input_size, coarse.input_size
        )));
    }
    if fine.in_channels != coarse.in_channels || fine.out_channels != coarse.out_channels {
        return Err(Error::Config(
            "coarse and fine generators must agree on input/output channels".into(),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// Segmentation map in [-1, 1], shape (batch, out_channels, size, size).
    pub seg_map: Tensor,
    /// Last decoder activation before the output head.
    pub handoff: Tensor,
}

#[derive(Clone, Debug)]
struct Skeleton {
    spec: GeneratorSpec,
    stem: Conv2d,
    stem_norm: Norm,
    down: Vec<DownsamplingBlock>,
    res: Vec<ResidualBlock>,
    up: Vec<UpsamplingBlock>,
    sfa: Vec<SfaBlock>,
    head: Conv2d,
}

impl Skeleton {
    fn new(spec: GeneratorSpec, init: &mut Init) -> Result<Self> {
        spec.validate()?;
        let bn = spec.batch_norm;
        let stem = Conv2d::new(
            &mut init.sub("stem"),
            spec.in_channels,
            spec.base_channels,
            STEM_KERNEL,
            1,
            1,
            1,
            !bn,
        )?;
        let stem_norm = Norm::new(&mut init.sub("stem_bn"), spec.base_channels, bn)?;
        let mut down = Vec::with_capacity(spec.n_down);
        for i in 0..spec.n_down {
            let cfg = BlockConfig::downsampling(spec.width(i), spec.width(i + 1)).with_batch_norm(bn);
            down.push(DownsamplingBlock::new(
                make_downsampling_block(&cfg)?,
                &mut init.sub(&format!("down{i}")),
            )?);
        }
        let deepest = spec.width(spec.n_down);
        let mut res = Vec::with_capacity(spec.n_res);
        for i in 0..spec.n_res {
            let cfg = BlockConfig::generator_residual(deepest).with_batch_norm(bn);
            res.push(ResidualBlock::new(
                make_generator_residual_block(&cfg)?,
                &mut init.sub(&format!("res{i}")),
            )?);
        }
        let mut up = Vec::with_capacity(spec.n_down);
        let mut sfa = Vec::with_capacity(spec.n_down);
        for j in 0..spec.n_down {
            let level = spec.n_down - 1 - j;
            let cfg = BlockConfig::upsampling(spec.width(level + 1), spec.width(level)).with_batch_norm(bn);
            up.push(UpsamplingBlock::new(
                make_upsampling_block(&cfg)?,
                &mut init.sub(&format!("up{j}")),
            )?);
            let side = spec.input_size >> level;
            let feat = TensorSpec::new(1, spec.width(level), side, side)?;
            sfa.push(SfaBlock::new(
                make_sfa_block_with(&feat, &feat, DEFAULT_LEAKY_SLOPE, bn)?,
                &mut init.sub(&format!("sfa{j}")),
            )?);
        }
        let head = Conv2d::new(
            &mut init.sub("head"),
            spec.base_channels,
            spec.out_channels,
            HEAD_KERNEL,
            1,
            1,
            1,
            true,
        )?;
        Ok(Self {
            spec,
            stem,
            stem_norm,
            down,
            res,
            up,
            sfa,
            head,
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<TensorSpec> {
        let s = TensorSpec::of(x)?;
        if s.channels != self.spec.in_channels
            || s.height != self.spec.input_size
            || s.width != self.spec.input_size
        {
            return Err(Error::Shape(format!(
                "generator expects (_, {}, {n}, {n}), got {s}",
                self.spec.in_channels,
                n = self.spec.input_size
            )));
        }
        Ok(s)
    }

    fn stem(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let h = self.stem_norm.forward(&self.stem.forward(x, pass)?, pass)?;
        leaky_relu(&h, DEFAULT_LEAKY_SLOPE)
    }

    /// Everything after the stem.
    fn body(&self, stem: Tensor, pass: Pass) -> Result<GeneratorOutput> {
        let mut skips = Vec::with_capacity(self.spec.n_down);
        let mut h = stem;
        for block in &self.down {
            skips.push(h.clone());
            h = block.forward(&h, pass)?;
        }
        for block in &self.res {
            h = block.forward(&h, pass)?;
        }
        for (up, sfa) in self.up.iter().zip(&self.sfa) {
            let top = up.forward(&h, pass)?;
            let bottom = skips.pop().expect("one skip per decoder stage");
            h = sfa.forward(&bottom, &top, pass)?;
        }
        let seg_map = self.head.forward(&h, pass)?.tanh()?;
        Ok(GeneratorOutput {
            seg_map,
            handoff: h,
        })
    }
}

/// Half-resolution generator that captures global vessel structure.
#[derive(Debug)]
pub struct CoarseGenerator {
    store: ParamStore,
    net: Skeleton,
}

impl CoarseGenerator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.net.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Shape of the hand-off features for a given batch size.
    pub fn handoff_spec(&self, batch: usize) -> Result<TensorSpec> {
        let s = &self.net.spec;
        TensorSpec::new(batch, s.base_channels, s.input_size, s.input_size)
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<GeneratorOutput> {
        self.net.check_input(x)?;
        let stem = self.net.stem(x, pass)?;
        self.net.body(stem, pass)
    }
}

pub fn build_coarse_generator(
    spec: GeneratorSpec,
    dtype: DType,
    device: &Device,
    rng: &mut dyn RngCore,
) -> Result<CoarseGenerator> {
    let mut store = ParamStore::new(dtype, device.clone());
    let net = Skeleton::new(spec, &mut Init::new(&mut store, rng))?;
    Ok(CoarseGenerator { store, net })
}

/// Full-resolution generator that refines local detail on top of the coarse
/// generator's hand-off.
#[derive(Debug)]
pub struct FineGenerator {
    store: ParamStore,
    net: Skeleton,
    handoff_channels: usize,
    handoff_up: UpsamplingBlock,
}

impl FineGenerator {
    pub fn spec(&self) -> &GeneratorSpec {
        &self.net.spec
    }

    pub fn handoff_channels(&self) -> usize {
        self.handoff_channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Forward pass. `handoff` is the coarse generator's hand-off at half
    /// resolution; `None` skips the merge entirely.
    pub fn forward(&self, x: &Tensor, handoff: Option<&Tensor>, pass: Pass) -> Result<GeneratorOutput> {
        let xs = self.net.check_input(x)?;
        let mut stem = self.net.stem(x, pass)?;
        if let Some(h) = handoff {
            let hs = TensorSpec::of(h)?;
            if hs.batch != xs.batch {
                return Err(Error::Shape(format!(
                    "hand-off batch {} does not match input batch {}",
                    hs.batch, xs.batch
                )));
            }
            let lifted = self.handoff_up.forward(h, pass)?;
            let (ls, ss) = (TensorSpec::of(&lifted)?, TensorSpec::of(&stem)?);
            if ls != ss {
                return Err(Error::Shape(format!(
                    "upsampled hand-off {ls} does not match fine stem output {ss}"
                )));
            }
            stem = (stem + lifted)?;
        }
        self.net.body(stem, pass)
    }
}

pub fn build_fine_generator(
    spec: GeneratorSpec,
    handoff_channels: usize,
    dtype: DType,
    device: &Device,
    rng: &mut dyn RngCore,
) -> Result<FineGenerator> {
    if handoff_channels == 0 {
        return Err(Error::Config("hand-off channel count must be >= 1".into()));
    }
    let mut store = ParamStore::new(dtype, device.clone());
    let mut init = Init::new(&mut store, rng);
    let net = Skeleton::new(spec, &mut init)?;
    let cfg = BlockConfig::upsampling(handoff_channels, spec.base_channels).with_batch_norm(spec.batch_norm);
    let handoff_up = UpsamplingBlock::new(make_upsampling_block(&cfg)?, &mut init.sub("handoff_up"))?;
    Ok(FineGenerator {
        store,
        net,
        handoff_channels,
        handoff_up,
    })
}

/// Both generators wired as a cascade.
#[derive(Debug)]
pub struct GeneratorPair {
    pub coarse: CoarseGenerator,
    pub fine: FineGenerator,
}

#[derive(Clone, Debug)]
pub struct CascadeOutput {
    pub coarse: GeneratorOutput,
    pub fine: GeneratorOutput,
    /// The area-downsampled input fed to the coarse generator.
    pub coarse_input: Tensor,
}

impl GeneratorPair {
    pub fn new(
        coarse_spec: GeneratorSpec,
        fine_spec: GeneratorSpec,
        dtype: DType,
        device: &Device,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        validate_pair(&coarse_spec, &fine_spec)?;
        let coarse = build_coarse_generator(coarse_spec, dtype, device, rng)?;
        let fine = build_fine_generator(fine_spec, coarse_spec.base_channels, dtype, device, rng)?;
        Ok(Self { coarse, fine })
    }

    /// Run both generators on a fine-resolution batch in [-1, 1]. The coarse
    /// generator sees the 2x area-downsampled batch.
    pub fn forward_cascade(&self, x_fine: &Tensor, pass: Pass) -> Result<CascadeOutput> {
        check_normalized(x_fine)?;
        let coarse_input = area_downsample(x_fine)?;
        let coarse = self.coarse.forward(&coarse_input, pass)?;
        let fine = self.fine.forward(x_fine, Some(&coarse.handoff), pass)?;
        Ok(CascadeOutput {
            coarse,
            fine,
            coarse_input,
        })
    }
}

/// Reject batches with any element outside [-1, 1] (or non-finite).
pub fn check_normalized(x: &Tensor) -> Result<()> {
    let max = x
        .detach()
        .abs()?
        .flatten_all()?
        .max(0)?
        .to_dtype(DType::F64)?
        .to_scalar::<f64>()?;
    if !(max <= 1.0) {
        return Err(Error::Data(format!(
            "input must be normalized to [-1, 1]; found |value| = {max}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(size: usize) -> GeneratorSpec {
        GeneratorSpec {
            base_channels: 4,
            n_res: 1,
            input_size: size,
            ..GeneratorSpec::fine()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(GeneratorSpec { input_size: 66, ..GeneratorSpec::fine() }.validate().is_err());
        assert!(GeneratorSpec { n_down: 0, ..GeneratorSpec::fine() }.validate().is_err());
        assert!(validate_pair(&GeneratorSpec::coarse(), &GeneratorSpec::fine()).is_ok());
        assert!(validate_pair(&GeneratorSpec::fine(), &GeneratorSpec::fine()).is_err());
    }

    #[test]
    fn handoff_shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fine = build_fine_generator(tiny(32), 4, DType::F32, &Device::Cpu, &mut rng).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let wrong = Tensor::zeros((1, 4, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(fine.forward(&x, Some(&wrong), Pass::EVAL), Err(Error::Shape(_))));
        let wrong_c = Tensor::zeros((1, 5, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(fine.forward(&x, Some(&wrong_c), Pass::EVAL).is_err());
    }

    #[test]
    fn unnormalized_input_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = GeneratorPair::new(tiny(16), tiny(32), DType::F32, &Device::Cpu, &mut rng).unwrap();
        let x = (Tensor::ones((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap() * 1.5).unwrap();
        assert!(matches!(pair.forward_cascade(&x, Pass::EVAL), Err(Error::Data(_))));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = build_coarse_generator(tiny(16), DType::F32, &Device::Cpu, &mut rng).unwrap();
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(g.forward(&x, Pass::EVAL).is_err());
    }
}

//! Downsampling, upsampling, spatial feature aggregation and the two
//! separable residual identity blocks.
//!
//! Each `make_*` constructor is pure: it validates a [`BlockConfig`] and
//! returns a [`LayerGraph`] describing layer order, output-shape arithmetic
//! and parameter count. A graph is turned into a runnable block by the
//! matching `*Block::new`, which draws parameters from an [`Init`].

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{leaky_relu, same_padding, Conv2d, ConvTranspose2d, Init, Norm, Pass, SeparableConv2d};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

/// Shape of a rank-4 activation: batch x channels x height x width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorSpec {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if batch == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "every dimension must be >= 1, got ({batch}, {channels}, {height}, {width})"
            )));
        }
        Ok(Self {
            batch,
            channels,
            height,
            width,
        })
    }

    pub fn of(t: &Tensor) -> Result<Self> {
        let (b, c, h, w) = t.dims4()?;
        Self::new(b, c, h, w)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.batch, self.channels, self.height, self.width)
    }

    pub fn same_spatial(&self, other: &TensorSpec) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl std::fmt::Display for TensorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub leaky_slope: f64,
    /// `false` swaps batch normalization for the identity (useful at batch 1).
    pub batch_norm: bool,
}

impl BlockConfig {
    pub fn downsampling(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: 3,
            stride: 2,
            dilation: 1,
            in_channels,
            out_channels,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            batch_norm: true,
        }
    }

    pub fn upsampling(in_channels: usize, out_channels: usize) -> Self {
        Self::downsampling(in_channels, out_channels)
    }

    pub fn generator_residual(channels: usize) -> Self {
        Self {
            kernel: 3,
            stride: 1,
            dilation: 2,
            in_channels: channels,
            out_channels: channels,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            batch_norm: true,
        }
    }

    pub fn discriminator_residual(channels: usize) -> Self {
        Self {
            dilation: 1,
            ..Self::generator_residual(channels)
        }
    }

    pub fn with_batch_norm(mut self, enabled: bool) -> Self {
        self.batch_norm = enabled;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config("stride and dilation must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Downsampling,
    Upsampling,
    GeneratorResidual,
    DiscriminatorResidual,
    SpatialFeatureAggregation,
}

/// One layer in a block's forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernel: usize,
        stride: usize,
        dilation: usize,
        out_channels: usize,
    },
    TransposedConv {
        kernel: usize,
        stride: usize,
        out_channels: usize,
    },
    SeparableConv {
        kernel: usize,
        dilation: usize,
        out_channels: usize,
    },
    BatchNorm,
    LeakyRelu,
    /// Elementwise addition of a second operand (identity skip or the SFA
    /// top features).
    Add,
}

/// Pure description of a block: what it computes and how shapes flow.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGraph {
    kind: BlockKind,
    config: BlockConfig,
    layers: Vec<LayerKind>,
    /// (bottom, top) for SFA blocks.
    sfa_inputs: Option<(TensorSpec, TensorSpec)>,
}

impl LayerGraph {
    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn config(&self) -> &BlockConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerKind] {
        &self.layers
    }

    /// Output shape for `input`. For SFA graphs `input` is the top operand.
    pub fn output_spec(&self, input: &TensorSpec) -> Result<TensorSpec> {
        let cfg = &self.config;
        if input.channels != cfg.in_channels && self.kind != BlockKind::SpatialFeatureAggregation {
            return Err(Error::Shape(format!(
                "{:?} block expects {} input channels, got {input}",
                self.kind, cfg.in_channels
            )));
        }
        let pad = same_padding(cfg.kernel, cfg.dilation);
        let span = cfg.dilation * (cfg.kernel - 1);
        match self.kind {
            BlockKind::Downsampling => {
                let out = |d: usize| (d + 2 * pad - span - 1) / cfg.stride + 1;
                TensorSpec::new(input.batch, cfg.out_channels, out(input.height), out(input.width))
            }
            BlockKind::Upsampling => {
                let out = |d: usize| (d - 1) * cfg.stride + span + UPSAMPLE_OUTPUT_PADDING + 1 - 2 * pad;
                TensorSpec::new(input.batch, cfg.out_channels, out(input.height), out(input.width))
            }
            BlockKind::GeneratorResidual | BlockKind::DiscriminatorResidual => Ok(*input),
            BlockKind::SpatialFeatureAggregation => {
                let (bottom, top) = self.sfa_inputs.expect("sfa graph carries its inputs");
                if input.channels != top.channels || !input.same_spatial(&bottom) {
                    return Err(Error::Shape(format!(
                        "SFA block built for top {top} and bottom {bottom}, got {input}"
                    )));
                }
                Ok(*input)
            }
        }
    }

    /// Number of trainable scalars a block built from this graph will own.
    pub fn param_count(&self) -> usize {
        let cfg = &self.config;
        let k2 = cfg.kernel * cfg.kernel;
        let bn = |c: usize| if cfg.batch_norm { 2 * c } else { 0 };
        let bias = |c: usize| if cfg.batch_norm { 0 } else { c };
        match self.kind {
            BlockKind::Downsampling | BlockKind::Upsampling => {
                k2 * cfg.in_channels * cfg.out_channels + bn(cfg.out_channels) + bias(cfg.out_channels)
            }
            BlockKind::GeneratorResidual | BlockKind::DiscriminatorResidual => {
                let c = cfg.in_channels;
                2 * (c * k2 + c * c) + 2 * bn(c)
            }
            BlockKind::SpatialFeatureAggregation => {
                let (bottom, top) = self.sfa_inputs.expect("sfa graph carries its inputs");
                bottom.channels * top.channels
                    + bn(top.channels)
                    + bias(top.channels)
                    + k2 * top.channels * top.channels
                    + top.channels
            }
        }
    }
}

const UPSAMPLE_OUTPUT_PADDING: usize = 1;

fn norm_act(cfg: &BlockConfig) -> Vec<LayerKind> {
    let mut v = Vec::with_capacity(2);
    if cfg.batch_norm {
        v.push(LayerKind::BatchNorm);
    }
    v.push(LayerKind::LeakyRelu);
    v
}

/// Halving block: convolution, batch norm, leaky rectifier.
pub fn make_downsampling_block(cfg: &BlockConfig) -> Result<LayerGraph> {
    cfg.validate()?;
    if cfg.stride != 2 {
        return Err(Error::Config(format!(
            "downsampling block halves resolution and needs stride 2, got {}",
            cfg.stride
        )));
    }
    if cfg.dilation != 1 {
        return Err(Error::Config(format!(
            "downsampling block uses dilation 1, got {}",
            cfg.dilation
        )));
    }
    let mut layers = vec![LayerKind::Conv {
        kernel: cfg.kernel,
        stride: cfg.stride,
        dilation: 1,
        out_channels: cfg.out_channels,
    }];
    layers.extend(norm_act(cfg));
    Ok(LayerGraph {
        kind: BlockKind::Downsampling,
        config: *cfg,
        layers,
        sfa_inputs: None,
    })
}

/// Doubling block: transposed convolution, batch norm, leaky rectifier.
pub fn make_upsampling_block(cfg: &BlockConfig) -> Result<LayerGraph> {
    cfg.validate()?;
    if cfg.stride != 2 {
        return Err(Error::Config(format!(
            "upsampling block doubles resolution and needs stride 2, got {}",
            cfg.stride
        )));
    }
    // With symmetric padding d*(k-1)/2 the doubled size needs output padding
    // 1, which a transposed convolution only accepts below max(stride, dilation).
    if UPSAMPLE_OUTPUT_PADDING >= cfg.stride.max(cfg.dilation) {
        return Err(Error::Config(
            "output padding cannot produce exactly twice the input size".into(),
        ));
    }
    let mut layers = vec![LayerKind::TransposedConv {
        kernel: cfg.kernel,
        stride: cfg.stride,
        out_channels: cfg.out_channels,
    }];
    layers.extend(norm_act(cfg));
    Ok(LayerGraph {
        kind: BlockKind::Upsampling,
        config: *cfg,
        layers,
        sfa_inputs: None,
    })
}

fn residual_layers(cfg: &BlockConfig, first_dilation: usize) -> Vec<LayerKind> {
    let mut layers = vec![LayerKind::SeparableConv {
        kernel: cfg.kernel,
        dilation: first_dilation,
        out_channels: cfg.out_channels,
    }];
    layers.extend(norm_act(cfg));
    layers.push(LayerKind::SeparableConv {
        kernel: cfg.kernel,
        dilation: 1,
        out_channels: cfg.out_channels,
    });
    if cfg.batch_norm {
        layers.push(LayerKind::BatchNorm);
    }
    layers.push(LayerKind::Add);
    layers.push(LayerKind::LeakyRelu);
    layers
}

fn check_residual(cfg: &BlockConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.in_channels != cfg.out_channels {
        return Err(Error::Config(format!(
            "residual identity block needs matching channels, got {} -> {}",
            cfg.in_channels, cfg.out_channels
        )));
    }
    if cfg.stride != 1 {
        return Err(Error::Config("residual identity block uses stride 1".into()));
    }
    Ok(())
}

/// Generator residual block: the first separable convolution is dilated.
pub fn make_generator_residual_block(cfg: &BlockConfig) -> Result<LayerGraph> {
    check_residual(cfg)?;
    Ok(LayerGraph {
        kind: BlockKind::GeneratorResidual,
        config: *cfg,
        layers: residual_layers(cfg, cfg.dilation),
        sfa_inputs: None,
    })
}

/// Discriminator residual block: both separable convolutions undilated.
pub fn make_discriminator_residual_block(cfg: &BlockConfig) -> Result<LayerGraph> {
    check_residual(cfg)?;
    let cfg = BlockConfig { dilation: 1, ..*cfg };
    Ok(LayerGraph {
        kind: BlockKind::DiscriminatorResidual,
        config: cfg,
        layers: residual_layers(&cfg, 1),
        sfa_inputs: None,
    })
}

/// Spatial feature aggregation: project `bottom` to `top`'s width with a 1x1
/// convolution, add it to `top`, fuse with a 3x3 convolution.
pub fn make_sfa_block(bottom: &TensorSpec, top: &TensorSpec) -> Result<LayerGraph> {
    make_sfa_block_with(bottom, top, DEFAULT_LEAKY_SLOPE, true)
}

pub fn make_sfa_block_with(
    bottom: &TensorSpec,
    top: &TensorSpec,
    leaky_slope: f64,
    batch_norm: bool,
) -> Result<LayerGraph> {
    if !bottom.same_spatial(top) {
        return Err(Error::Shape(format!(
            "SFA inputs must share spatial dims: bottom {bottom}, top {top}"
        )));
    }
    let config = BlockConfig {
        kernel: 3,
        stride: 1,
        dilation: 1,
        in_channels: bottom.channels,
        out_channels: top.channels,
        leaky_slope,
        batch_norm,
    };
    config.validate()?;
    let mut layers = vec![LayerKind::Conv {
        kernel: 1,
        stride: 1,
        dilation: 1,
        out_channels: top.channels,
    }];
    layers.extend(norm_act(&config));
    layers.extend([
        LayerKind::Add,
        LayerKind::Conv {
            kernel: 3,
            stride: 1,
            dilation: 1,
            out_channels: top.channels,
        },
        LayerKind::LeakyRelu,
    ]);
    Ok(LayerGraph {
        kind: BlockKind::SpatialFeatureAggregation,
        config,
        layers,
        sfa_inputs: Some((*bottom, *top)),
    })
}

fn expect_kind(graph: &LayerGraph, kinds: &[BlockKind]) -> Result<()> {
    if kinds.contains(&graph.kind) {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "expected a {kinds:?} graph, got {:?}",
            graph.kind
        )))
    }
}

fn check_channels(graph: &LayerGraph, x: &Tensor) -> Result<TensorSpec> {
    let spec = TensorSpec::of(x)?;
    if spec.channels != graph.config.in_channels {
        return Err(Error::Shape(format!(
            "{:?} block expects {} channels, got {spec}",
            graph.kind, graph.config.in_channels
        )));
    }
    Ok(spec)
}

#[derive(Clone, Debug)]
pub struct DownsamplingBlock {
    graph: LayerGraph,
    conv: Conv2d,
    norm: Norm,
}

impl DownsamplingBlock {
    pub fn new(graph: LayerGraph, init: &mut Init) -> Result<Self> {
        expect_kind(&graph, &[BlockKind::Downsampling])?;
        let c = graph.config;
        let conv = Conv2d::new(
            &mut init.sub("conv"),
            c.in_channels,
            c.out_channels,
            c.kernel,
            c.stride,
            1,
            1,
            !c.batch_norm,
        )?;
        let norm = Norm::new(&mut init.sub("bn"), c.out_channels, c.batch_norm)?;
        Ok(Self { graph, conv, norm })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        check_channels(&self.graph, x)?;
        let y = self.norm.forward(&self.conv.forward(x, pass)?, pass)?;
        leaky_relu(&y, self.graph.config.leaky_slope)
    }
}

#[derive(Clone, Debug)]
pub struct UpsamplingBlock {
    graph: LayerGraph,
    conv: ConvTranspose2d,
    norm: Norm,
}

impl UpsamplingBlock {
    pub fn new(graph: LayerGraph, init: &mut Init) -> Result<Self> {
        expect_kind(&graph, &[BlockKind::Upsampling])?;
        let c = graph.config;
        let conv = ConvTranspose2d::new(
            &mut init.sub("conv"),
            c.in_channels,
            c.out_channels,
            c.kernel,
            c.stride,
            c.dilation,
            UPSAMPLE_OUTPUT_PADDING,
            !c.batch_norm,
        )?;
        let norm = Norm::new(&mut init.sub("bn"), c.out_channels, c.batch_norm)?;
        Ok(Self { graph, conv, norm })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        check_channels(&self.graph, x)?;
        let y = self.norm.forward(&self.conv.forward(x, pass)?, pass)?;
        leaky_relu(&y, self.graph.config.leaky_slope)
    }
}

/// Separable residual identity block (generator or discriminator flavour).
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    graph: LayerGraph,
    sep1: SeparableConv2d,
    norm1: Norm,
    sep2: SeparableConv2d,
    norm2: Norm,
}

impl ResidualBlock {
    pub fn new(graph: LayerGraph, init: &mut Init) -> Result<Self> {
        expect_kind(
            &graph,
            &[BlockKind::GeneratorResidual, BlockKind::DiscriminatorResidual],
        )?;
        let c = graph.config;
        let ch = c.in_channels;
        let sep1 = SeparableConv2d::new(&mut init.sub("sep1"), ch, ch, c.kernel, c.dilation)?;
        let norm1 = Norm::new(&mut init.sub("bn1"), ch, c.batch_norm)?;
        let sep2 = SeparableConv2d::new(&mut init.sub("sep2"), ch, ch, c.kernel, 1)?;
        let norm2 = Norm::new(&mut init.sub("bn2"), ch, c.batch_norm)?;
        Ok(Self {
            graph,
            sep1,
            norm1,
            sep2,
            norm2,
        })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        check_channels(&self.graph, x)?;
        let slope = self.graph.config.leaky_slope;
        let h = self.norm1.forward(&self.sep1.forward(x, pass)?, pass)?;
        let h = leaky_relu(&h, slope)?;
        let h = self.norm2.forward(&self.sep2.forward(&h, pass)?, pass)?;
        leaky_relu(&(h + x)?, slope)
    }
}

#[derive(Clone, Debug)]
pub struct SfaBlock {
    graph: LayerGraph,
    project: Conv2d,
    norm: Norm,
    fuse: Conv2d,
}

impl SfaBlock {
    pub fn new(graph: LayerGraph, init: &mut Init) -> Result<Self> {
        expect_kind(&graph, &[BlockKind::SpatialFeatureAggregation])?;
        let c = graph.config;
        let project = Conv2d::new(
            &mut init.sub("project"),
            c.in_channels,
            c.out_channels,
            1,
            1,
            1,
            1,
            !c.batch_norm,
        )?;
        let norm = Norm::new(&mut init.sub("bn"), c.out_channels, c.batch_norm)?;
        let fuse = Conv2d::new(
            &mut init.sub("fuse"),
            c.out_channels,
            c.out_channels,
            3,
            1,
            1,
            1,
            true,
        )?;
        Ok(Self {
            graph,
            project,
            norm,
            fuse,
        })
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn forward(&self, bottom: &Tensor, top: &Tensor, pass: Pass) -> Result<Tensor> {
        let b = check_channels(&self.graph, bottom)?;
        let t = TensorSpec::of(top)?;
        if !b.same_spatial(&t) || b.batch != t.batch {
            return Err(Error::Shape(format!(
                "SFA inputs must share batch and spatial dims: bottom {b}, top {t}"
            )));
        }
        if t.channels != self.graph.config.out_channels {
            return Err(Error::Shape(format!(
                "SFA top expects {} channels, got {t}",
                self.graph.config.out_channels
            )));
        }
        let slope = self.graph.config.leaky_slope;
        let p = self.norm.forward(&self.project.forward(bottom, pass)?, pass)?;
        let p = leaky_relu(&p, slope)?;
        let fused = self.fuse.forward(&(p + top)?, pass)?;
        leaky_relu(&fused, slope)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(b: usize, c: usize, h: usize, w: usize) -> TensorSpec {
        TensorSpec::new(b, c, h, w).unwrap()
    }

    fn ceil_div(a: usize, b: usize) -> usize {
        (a + b - 1) / b
    }

    #[test]
    fn downsampling_examples() {
        let g = make_downsampling_block(&BlockConfig::downsampling(64, 128)).unwrap();
        assert_eq!(g.output_spec(&spec(1, 64, 128, 128)).unwrap(), spec(1, 128, 64, 64));
        let g = make_downsampling_block(&BlockConfig::downsampling(3, 32)).unwrap();
        assert_eq!(g.output_spec(&spec(24, 3, 128, 128)).unwrap(), spec(24, 32, 64, 64));
        let g = make_downsampling_block(&BlockConfig::downsampling(32, 64)).unwrap();
        assert_eq!(
            g.output_spec(&spec(1, 32, 65, 65)).unwrap(),
            spec(1, 64, ceil_div(65, 2), ceil_div(65, 2))
        );
        assert_eq!(
            g.layers(),
            &[
                LayerKind::Conv {
                    kernel: 3,
                    stride: 2,
                    dilation: 1,
                    out_channels: 64
                },
                LayerKind::BatchNorm,
                LayerKind::LeakyRelu
            ]
        );
    }

    #[test]
    fn downsampling_rejects_other_strides() {
        let mut cfg = BlockConfig::downsampling(8, 8);
        cfg.stride = 1;
        assert!(make_downsampling_block(&cfg).is_err());
        cfg.stride = 3;
        assert!(make_downsampling_block(&cfg).is_err());
    }

    #[test]
    fn upsampling_examples() {
        let g = make_upsampling_block(&BlockConfig::upsampling(128, 64)).unwrap();
        assert_eq!(g.output_spec(&spec(1, 128, 64, 64)).unwrap(), spec(1, 64, 128, 128));
        let g = make_upsampling_block(&BlockConfig::upsampling(64, 32)).unwrap();
        assert_eq!(g.output_spec(&spec(24, 64, 32, 32)).unwrap(), spec(24, 32, 64, 64));
        assert_eq!(g.layers()[0], LayerKind::TransposedConv { kernel: 3, stride: 2, out_channels: 32 });
        let mut cfg = BlockConfig::upsampling(4, 4);
        cfg.stride = 1;
        assert!(make_upsampling_block(&cfg).is_err());
        cfg.stride = 2;
        cfg.kernel = 4;
        assert!(make_upsampling_block(&cfg).is_err());
    }

    #[test]
    fn down_then_up_restores_spatial_dims() {
        let down = make_downsampling_block(&BlockConfig::downsampling(32, 64)).unwrap();
        let up = make_upsampling_block(&BlockConfig::upsampling(64, 32)).unwrap();
        let x = spec(1, 32, 128, 128);
        let y = up.output_spec(&down.output_spec(&x).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn residual_blocks_reject_channel_mismatch() {
        let mut cfg = BlockConfig::generator_residual(16);
        cfg.out_channels = 8;
        assert!(make_generator_residual_block(&cfg).is_err());
        assert!(make_discriminator_residual_block(&cfg).is_err());
    }

    #[test]
    fn residual_graph_order_and_dilation() {
        let g = make_generator_residual_block(&BlockConfig::generator_residual(128)).unwrap();
        assert_eq!(g.output_spec(&spec(1, 128, 32, 32)).unwrap(), spec(1, 128, 32, 32));
        assert_eq!(
            g.layers(),
            &[
                LayerKind::SeparableConv { kernel: 3, dilation: 2, out_channels: 128 },
                LayerKind::BatchNorm,
                LayerKind::LeakyRelu,
                LayerKind::SeparableConv { kernel: 3, dilation: 1, out_channels: 128 },
                LayerKind::BatchNorm,
                LayerKind::Add,
                LayerKind::LeakyRelu,
            ]
        );
        // The discriminator flavour forces dilation 1 even if asked otherwise.
        let d = make_discriminator_residual_block(&BlockConfig::generator_residual(128)).unwrap();
        assert_eq!(d.config().dilation, 1);
        assert!(d
            .layers()
            .iter()
            .all(|l| !matches!(l, LayerKind::SeparableConv { dilation, .. } if *dilation != 1)));
    }

    #[test]
    fn residual_param_count_beats_vanilla() {
        // Vanilla: two full k x k convolutions, same normalization.
        let vanilla = |c: usize, k: usize| 2 * c * c * k * k + 4 * c;
        for c in [2, 16, 64, 128] {
            for cfg in [BlockConfig::generator_residual(c), BlockConfig::discriminator_residual(c)] {
                let g = make_generator_residual_block(&cfg).unwrap();
                assert!(g.param_count() < vanilla(c, 3), "c={c}");
                let d = make_discriminator_residual_block(&cfg).unwrap();
                assert!(d.param_count() < vanilla(c, 3), "c={c}");
            }
        }
    }

    #[test]
    fn sfa_examples() {
        let g = make_sfa_block(&spec(1, 64, 128, 128), &spec(1, 64, 128, 128)).unwrap();
        assert_eq!(g.output_spec(&spec(1, 64, 128, 128)).unwrap(), spec(1, 64, 128, 128));
        let g = make_sfa_block(&spec(1, 32, 64, 64), &spec(1, 128, 64, 64)).unwrap();
        assert_eq!(g.output_spec(&spec(1, 128, 64, 64)).unwrap(), spec(1, 128, 64, 64));
        assert!(matches!(
            make_sfa_block(&spec(1, 32, 64, 64), &spec(1, 32, 32, 32)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn built_param_counts_match_graph() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut store, &mut rng);
        let graphs = [
            make_downsampling_block(&BlockConfig::downsampling(4, 8)).unwrap(),
            make_downsampling_block(&BlockConfig::downsampling(4, 8).with_batch_norm(false)).unwrap(),
            make_upsampling_block(&BlockConfig::upsampling(8, 4)).unwrap(),
            make_upsampling_block(&BlockConfig::upsampling(8, 4).with_batch_norm(false)).unwrap(),
            make_generator_residual_block(&BlockConfig::generator_residual(8)).unwrap(),
            make_discriminator_residual_block(&BlockConfig::discriminator_residual(8)).unwrap(),
            make_sfa_block(&spec(1, 4, 8, 8), &spec(1, 8, 8, 8)).unwrap(),
        ];
        let mut total = 0;
        for (i, g) in graphs.into_iter().enumerate() {
            let mut sub = init.sub(&format!("b{i}"));
            total += g.param_count();
            match g.kind() {
                BlockKind::Downsampling => drop(DownsamplingBlock::new(g, &mut sub).unwrap()),
                BlockKind::Upsampling => drop(UpsamplingBlock::new(g, &mut sub).unwrap()),
                BlockKind::SpatialFeatureAggregation => drop(SfaBlock::new(g, &mut sub).unwrap()),
                _ => drop(ResidualBlock::new(g, &mut sub).unwrap()),
            }
        }
        assert_eq!(store.param_count(), total);
    }

    #[test]
    fn wrong_graph_kind_rejected() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut init = Init::new(&mut store, &mut rng);
        let g = make_upsampling_block(&BlockConfig::upsampling(8, 4)).unwrap();
        assert!(DownsamplingBlock::new(g, &mut init).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn down_up_round_trip_for_even_sizes(half_h in 1usize..80, half_w in 1usize..80, c in 1usize..64) {
            let down = make_downsampling_block(&BlockConfig::downsampling(c, 2 * c)).unwrap();
            let up = make_upsampling_block(&BlockConfig::upsampling(2 * c, c)).unwrap();
            let x = spec(2, c, 2 * half_h, 2 * half_w);
            prop_assert_eq!(up.output_spec(&down.output_spec(&x).unwrap()).unwrap(), x);
        }
    }
}

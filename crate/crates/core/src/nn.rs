//! Minimal layer toolkit on top of `candle_core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path names so a whole
//! network can be written to (and validated against) a checkpoint. Running
//! batch-norm statistics are kept as non-trainable buffers in the same store.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, WithDType};
use rand::RngCore;
use rand_distr::{Distribution, Normal};

use crate::conv::{conv2d, conv_transpose2d, ConvParams};
use crate::error::{Error, Result};

/// Standard deviation of the normal initializer used for every convolution.
pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalization behaves during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics, running statistics updated.
    Train,
    /// Batch statistics, running statistics left untouched.
    Batch,
    /// Stored running statistics (inference).
    Running,
}

/// Options threaded through every forward call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub norm: NormMode,
    /// When set, parameters enter the graph detached so no gradient is
    /// accumulated for them.
    pub frozen: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        norm: NormMode::Train,
        frozen: false,
    };
    /// Batch statistics with frozen parameters: the view a network gets while
    /// its adversary is being optimized.
    pub const FROZEN: Pass = Pass {
        norm: NormMode::Batch,
        frozen: true,
    };
    pub const EVAL: Pass = Pass {
        norm: NormMode::Running,
        frozen: true,
    };
    /// Running statistics with tracked parameters, used for gradient checks.
    pub const FIXED_STATS: Pass = Pass {
        norm: NormMode::Running,
        frozen: false,
    };

    fn param(&self, v: &Var) -> Tensor {
        if self.frozen {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        }
    }
}

/// Named trainable parameters and non-trainable buffers of one network.
#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.params.len())
            .field("buffers", &self.buffers.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            dtype,
            device,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn trainable(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Every parameter and buffer, buffers prefixed with `buffer.`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        out.extend(
            self.buffers
                .iter()
                .map(|(k, v)| (format!("buffer.{k}"), v.as_tensor().clone())),
        );
        out
    }

    /// Overwrite parameters and buffers from `named_tensors`-style entries.
    /// Every entry of the store must be present with an identical shape.
    pub fn load_named(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut expected = 0usize;
        for (name, var) in self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.buffers.iter().map(|(k, v)| (format!("buffer.{k}"), v)))
        {
            expected += 1;
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "tensor `{name}`: stored {:?}, network expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        if expected != tensors.len() {
            let extra: Vec<_> = tensors
                .keys()
                .filter(|k| {
                    let bare = k.strip_prefix("buffer.").unwrap_or(k);
                    !self.params.contains_key(k.as_str()) && !self.buffers.contains_key(bare)
                })
                .cloned()
                .collect();
            return Err(Error::Shape(format!("unexpected tensors {extra:?}")));
        }
        Ok(())
    }

    /// Set every trainable parameter to zero. Buffers are left alone.
    pub fn zero_all(&self) -> Result<()> {
        for v in self.params.values() {
            v.set(&v.zeros_like()?)?;
        }
        Ok(())
    }

    /// Deep copy with fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Var>> {
            m.iter()
                .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
                .collect()
        };
        Ok(Self {
            dtype: self.dtype,
            device: self.device.clone(),
            params: copy(&self.params)?,
            buffers: copy(&self.buffers)?,
        })
    }
}

/// Builder handing out freshly initialized variables under a path prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut dyn RngCore,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn RngCore) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_> {
        let prefix = self.path(name);
        Init {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn register(&mut self, name: &str, data: Vec<f64>, shape: &[usize], trainable: bool) -> Result<Var> {
        let key = self.path(name);
        let t = Tensor::from_vec(data, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let map = if trainable {
            &mut self.store.params
        } else {
            &mut self.store.buffers
        };
        if map.insert(key.clone(), var.clone()).is_some() {
            return Err(Error::Config(format!("duplicate parameter name `{key}`")));
        }
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        self.register(name, data, shape, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape, true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.register(name, vec![value; n], shape, false)
    }
}

/// "Same" padding for an odd kernel.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

/// Piecewise-linear unit `x` for `x > 0`, `slope * x` otherwise. The
/// derivative at 0 is `slope`.
struct Leaky(f64);

impl Leaky {
    fn map<T: WithDType>(&self, v: &[T]) -> Vec<T> {
        let slope = T::from_f64(self.0);
        v.iter().map(|&x| if x > T::zero() { x } else { x * slope }).collect()
    }

    fn derivative<T: WithDType>(&self, x: &[T], grad: &[T]) -> Vec<T> {
        let slope = T::from_f64(self.0);
        x.iter()
            .zip(grad)
            .map(|(&x, &g)| if x > T::zero() { g } else { g * slope })
            .collect()
    }
}

impl CustomOp1 for Leaky {
    fn name(&self) -> &'static str {
        "leaky"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (a, b) = l
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("activation input must be contiguous".into()))?;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(self.map(&v[a..b])),
            CpuStorage::F64(v) => CpuStorage::F64(self.map(&v[a..b])),
            _ => return Err(candle_core::Error::Msg("activation supports f32 or f64".into())),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.to_dtype(x.dtype())?.flatten_all()?;
        let x_flat = x.flatten_all()?;
        let g = match x.dtype() {
            DType::F32 => Tensor::from_vec(
                self.derivative(&x_flat.to_vec1::<f32>()?, &grad.to_vec1::<f32>()?),
                x.shape(),
                x.device(),
            )?,
            DType::F64 => Tensor::from_vec(
                self.derivative(&x_flat.to_vec1::<f64>()?, &grad.to_vec1::<f64>()?),
                x.shape(),
                x.device(),
            )?,
            dt => return Err(candle_core::Error::Msg(format!("activation backward: unsupported dtype {dt:?}"))),
        };
        Ok(Some(g))
    }
}

/// `max(x, 0)` with derivative 0 at `x = 0`.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    leaky_relu(x, 0.0)
}

/// `x` for positive inputs, `slope * x` otherwise.
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if !x.device().is_cpu() {
        let mask = x.gt(0.0)?.to_dtype(x.dtype())?;
        let neg = (mask.affine(-1.0, 1.0)? * slope)?;
        return Ok((x * (mask + neg)?)?);
    }
    Ok(x.contiguous()?.apply_op1(Leaky(slope))?)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.normal(
            "weight",
            &[out_channels, in_channels / groups, kernel, kernel],
            INIT_STD,
        )?;
        let bias = if bias {
            Some(init.constant("bias", &[out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: same_padding(kernel, dilation),
            dilation,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let w = pass.param(&self.weight);
        let y = conv2d(
            x,
            &w,
            ConvParams {
                stride: self.stride,
                padding: self.padding,
                dilation: self.dilation,
                groups: self.groups,
            },
        )?;
        match &self.bias {
            Some(b) => {
                let b = pass.param(b).reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    output_padding: usize,
    dilation: usize,
}

impl ConvTranspose2d {
    pub fn new(
        init: &mut Init,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        output_padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = init.normal(
            "weight",
            &[in_channels, out_channels, kernel, kernel],
            INIT_STD,
        )?;
        let bias = if bias {
            Some(init.constant("bias", &[out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: same_padding(kernel, dilation),
            output_padding,
            dilation,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let w = pass.param(&self.weight);
        let y = conv_transpose2d(
            x,
            &w,
            ConvParams {
                stride: self.stride,
                padding: self.padding,
                dilation: self.dilation,
                groups: 1,
            },
            self.output_padding,
        )?;
        match &self.bias {
            Some(b) => {
                let b = pass.param(b).reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }
}

/// Depthwise convolution followed by a pointwise 1x1 convolution.
#[derive(Clone, Debug)]
pub struct SeparableConv2d {
    depthwise: Conv2d,
    pointwise: Conv2d,
}

impl SeparableConv2d {
    pub fn new(
        init: &mut Init,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        let depthwise = Conv2d::new(
            &mut init.sub("depthwise"),
            in_channels,
            in_channels,
            kernel,
            1,
            dilation,
            in_channels,
            false,
        )?;
        let pointwise = Conv2d::new(
            &mut init.sub("pointwise"),
            in_channels,
            out_channels,
            1,
            1,
            1,
            1,
            false,
        )?;
        Ok(Self {
            depthwise,
            pointwise,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        self.pointwise
            .forward(&self.depthwise.forward(x, pass)?, pass)
    }
}

/// Per-channel mean of (B, C, H, W) kept as (1, C, 1, 1). Reduces the
/// contiguous spatial axis first.
fn channel_mean(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let s = x.reshape((b, c, h * w))?.sum_keepdim(2)?.sum_keepdim(0)?;
    Ok((s / (b * h * w) as f64)?.reshape((1, c, 1, 1))?)
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(init: &mut Init, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: init.constant("gamma", &[channels], 1.0)?,
            beta: init.constant("beta", &[channels], 0.0)?,
            running_mean: init.buffer("running_mean", &[channels], 0.0)?,
            running_var: init.buffer("running_var", &[channels], 1.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        let (mean, var) = match pass.norm {
            NormMode::Running => (
                self.running_mean.as_detached_tensor().reshape((1, (), 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, (), 1, 1))?,
            ),
            NormMode::Train | NormMode::Batch => {
                let mean = channel_mean(x)?;
                let var = channel_mean(&x.broadcast_sub(&mean)?.sqr()?)?;
                if pass.norm == NormMode::Train {
                    self.update_running(&mean, &var, x)?;
                }
                (mean, var)
            }
        };
        let gamma = pass.param(&self.gamma).reshape((1, (), 1, 1))?;
        let beta = pass.param(&self.beta).reshape((1, (), 1, 1))?;
        let normed = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, x: &Tensor) -> Result<()> {
        let (b, _, h, w) = x.dims4()?;
        let n = (b * h * w) as f64;
        let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let mean = mean.detach().flatten_all()?;
        let var = var.detach().flatten_all()?.affine(unbiased, 0.0)?;
        let rm = self
            .running_mean
            .as_tensor()
            .affine(1.0 - BN_MOMENTUM, 0.0)?
            .add(&mean.affine(BN_MOMENTUM, 0.0)?)?;
        let rv = self
            .running_var
            .as_tensor()
            .affine(1.0 - BN_MOMENTUM, 0.0)?
            .add(&var.affine(BN_MOMENTUM, 0.0)?)?;
        self.running_mean.set(&rm)?;
        self.running_var.set(&rv)?;
        Ok(())
    }
}

/// Optional batch normalization: blocks built without normalization pass
/// tensors through unchanged.
#[derive(Clone, Debug)]
pub struct Norm(Option<BatchNorm2d>);

impl Norm {
    pub fn new(init: &mut Init, channels: usize, enabled: bool) -> Result<Self> {
        Ok(Norm(if enabled {
            Some(BatchNorm2d::new(init, channels)?)
        } else {
            None
        }))
    }

    pub fn forward(&self, x: &Tensor, pass: Pass) -> Result<Tensor> {
        match &self.0 {
            Some(bn) => bn.forward(x, pass),
            None => Ok(x.clone()),
        }
    }
}

/// 2x2 average pooling (area downsampling).
pub fn area_downsample(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seed_deterministic() {
        let build = || {
            let mut store = ParamStore::new(DType::F32, Device::Cpu);
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut init = Init::new(&mut store, &mut rng);
            Conv2d::new(&mut init.sub("c"), 3, 4, 3, 1, 1, 1, true).unwrap();
            store
        };
        let a = build().named_tensors();
        let b = build().named_tensors();
        for ((na, ta), (nb, tb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            let d = (ta - tb).unwrap().abs().unwrap().max_all().unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut init = Init::new(&mut store, &mut rng);
        init.constant("a", &[1], 0.0).unwrap();
        assert!(init.constant("a", &[1], 0.0).is_err());
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap();
        let y: Vec<f64> = leaky_relu(&x, 0.2).unwrap().to_vec1().unwrap();
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
    }

    #[test]
    fn activation_subgradients() {
        let x = Var::new(&[-2.0f64, 0.0, 3.0], &Device::Cpu).unwrap();
        let g = leaky_relu(&x, 0.2).unwrap().sum_all().unwrap().backward().unwrap();
        let d: Vec<f64> = g.get(&x).unwrap().to_vec1().unwrap();
        assert_eq!(d, vec![0.2, 0.2, 1.0]);
        let g = relu(&x).unwrap().sum_all().unwrap().backward().unwrap();
        let d: Vec<f64> = g.get(&x).unwrap().to_vec1().unwrap();
        assert_eq!(d, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_norm_train_updates_running_stats_only_in_train_mode() {
        let mut store = ParamStore::new(DType::F64, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bn = BatchNorm2d::new(&mut Init::new(&mut store, &mut rng), 2).unwrap();
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 2, 2, 2))
            .unwrap();
        bn.forward(&x, Pass::FROZEN).unwrap();
        let rm: Vec<f64> = bn.running_mean.as_tensor().to_vec1().unwrap();
        assert_eq!(rm, vec![0.0, 0.0]);
        let y = bn.forward(&x, Pass::TRAIN).unwrap();
        let rm: Vec<f64> = bn.running_mean.as_tensor().to_vec1().unwrap();
        // channel 0 holds {0,1,2,3,8,9,10,11}: mean 5.5
        assert!((rm[0] - 0.55).abs() < 1e-12);
        let m: f64 = y.mean_all().unwrap().to_scalar().unwrap();
        assert!(m.abs() < 1e-12);
    }

    #[test]
    fn load_named_rejects_shape_change() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Init::new(&mut store, &mut rng).constant("w", &[2, 2], 1.0).unwrap();
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::zeros((3, 2), DType::F32, &Device::Cpu).unwrap());
        assert!(store.load_named(&m).is_err());
        m.insert("w".to_string(), Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap());
        store.load_named(&m).unwrap();
        m.insert("extra".to_string(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        assert!(store.load_named(&m).is_err());
    }
}

//! 2-D convolution as row-contiguous im2col followed by a GEMM.
//!
//! Column buffers are built one sample at a time and never retained: the
//! backward pass rebuilds them from the saved input. Grouped convolutions
//! (depthwise in particular) and layers with very few output channels skip
//! im2col and accumulate shifted input rows straight into the output.

use std::ops::{AddAssign, Mul};

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Output-channel count up to which a direct loop beats a skinny GEMM.
const DIRECT_MAX_OUT: usize = 4;

#[derive(Clone, Copy, Debug)]
struct Geom {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn new(x: &[usize], kernel: &[usize], p: ConvParams) -> candle_core::Result<Self> {
        let bad = |m: String| candle_core::Error::Msg(m);
        let (&[batch, c_in, h, w], &[c_out, cg, kh, kw]) = (x, kernel) else {
            return Err(bad(format!("conv2d expects rank-4 operands, got {x:?} and {kernel:?}")));
        };
        if kh != kw {
            return Err(bad(format!("conv2d needs a square kernel, got {kh}x{kw}")));
        }
        if p.groups == 0 || c_in != cg * p.groups || c_out % p.groups != 0 {
            return Err(bad(format!(
                "conv2d channel mismatch: input {c_in}, kernel {cg} per group, {} groups, {c_out} outputs",
                p.groups
            )));
        }
        if p.stride == 0 || p.dilation == 0 {
            return Err(bad("conv2d stride and dilation must be >= 1".into()));
        }
        let span = p.dilation * (kh - 1) + 1;
        if h + 2 * p.padding < span || w + 2 * p.padding < span {
            return Err(bad(format!("conv2d input {h}x{w} is smaller than the kernel span {span}")));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride: p.stride,
            pad: p.padding,
            dil: p.dilation,
            groups: p.groups,
            ho: (h + 2 * p.padding - span) / p.stride + 1,
            wo: (w + 2 * p.padding - span) / p.stride + 1,
        })
    }

    fn l(&self) -> usize {
        self.ho * self.wo
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    /// GEMM pays off only with several output rows per group.
    fn use_gemm(&self) -> bool {
        self.groups == 1 && self.c_out > DIRECT_MAX_OUT
    }

    /// Output columns `[lo, hi)` whose input column `ox*s + off - pad` is in range.
    fn valid_cols(&self, off: usize) -> (usize, usize) {
        let first = (self.pad as isize - off as isize).max(0) as usize;
        let lo = first.div_ceil(self.stride);
        let last = self.w as isize - 1 + self.pad as isize - off as isize;
        let hi = if last < 0 {
            0
        } else {
            (last as usize / self.stride + 1).min(self.wo)
        };
        (lo, hi.max(lo))
    }
}

trait Float: WithDType + Copy + Default + AddAssign + Mul<Output = Self> {}
impl Float for f32 {}
impl Float for f64 {}

/// Scatter one sample `(C, H, W)` into columns `(C*k*k, Ho*Wo)`.
fn unfold<T: Float>(x: &[T], g: &Geom, cols: &mut [T]) {
    let l = g.l();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let dst = &mut cols[row * l..(row + 1) * l];
                let (lo, hi) = g.valid_cols(kw * g.dil);
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + kh * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        out_row.fill(T::default());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(T::default());
                    out_row[hi..].fill(T::default());
                    let ix0 = lo * g.stride + kw * g.dil - g.pad;
                    if g.stride == 1 {
                        out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for (j, v) in out_row[lo..hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`unfold`]: accumulate columns back into a `(C, H, W)` sample.
fn fold<T: Float>(cols: &[T], g: &Geom, x: &mut [T]) {
    let l = g.l();
    for c in 0..g.c_in {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (c * g.k + kh) * g.k + kw;
                let src = &cols[row * l..(row + 1) * l];
                let (lo, hi) = g.valid_cols(kw * g.dil);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + kh * g.dil) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let in_row = &src[oy * g.wo..(oy + 1) * g.wo];
                    let ix0 = lo * g.stride + kw * g.dil - g.pad;
                    for (j, &v) in in_row[lo..hi].iter().enumerate() {
                        dst[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

fn matmul<T: Float>(a: &[T], a_shape: (usize, usize), b: &[T], b_shape: (usize, usize), transpose: (bool, bool)) -> candle_core::Result<Vec<T>> {
    let dev = Device::Cpu;
    let mut ta = Tensor::from_slice(a, a_shape, &dev)?;
    let mut tb = Tensor::from_slice(b, b_shape, &dev)?;
    if transpose.0 {
        ta = ta.t()?;
    }
    if transpose.1 {
        tb = tb.t()?;
    }
    ta.matmul(&tb)?.flatten_all()?.to_vec1::<T>()
}

/// One kernel tap applied to one output row: output `(oc, oy, lo..hi)` reads
/// input `(c, iy, ix0 + j*stride)` with weight index `widx`.
struct Tap {
    widx: usize,
    out: usize,
    inp: usize,
    n: usize,
}

/// Visit every in-range (tap, output row) pair of one sample. Offsets are
/// relative to the sample.
fn for_each_tap(g: &Geom, mut f: impl FnMut(&Tap)) {
    let (cg, og) = (g.c_in / g.groups, g.out_per_group());
    for oc in 0..g.c_out {
        let grp = oc / og;
        for ci in 0..cg {
            let c = grp * cg + ci;
            for kh in 0..g.k {
                for kw in 0..g.k {
                    let widx = ((oc * cg + ci) * g.k + kh) * g.k + kw;
                    let (lo, hi) = g.valid_cols(kw * g.dil);
                    if lo >= hi {
                        continue;
                    }
                    let ix0 = lo * g.stride + kw * g.dil - g.pad;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + kh * g.dil) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        f(&Tap {
                            widx,
                            out: (oc * g.ho + oy) * g.wo + lo,
                            inp: (c * g.h + iy as usize) * g.w + ix0,
                            n: hi - lo,
                        });
                    }
                }
            }
        }
    }
}

fn forward<T: Float>(x: &[T], kernel: &[T], g: &Geom) -> candle_core::Result<Vec<T>> {
    let (l, rows) = (g.l(), g.rows());
    let sample = g.c_in * g.h * g.w;
    if !g.use_gemm() {
        let mut out = vec![T::default(); g.batch * g.c_out * l];
        for b in 0..g.batch {
            let xb = &x[b * sample..(b + 1) * sample];
            let ob = &mut out[b * g.c_out * l..(b + 1) * g.c_out * l];
            for_each_tap(g, |t| {
                let wv = kernel[t.widx];
                let dst = &mut ob[t.out..t.out + t.n];
                if g.stride == 1 {
                    for (d, &s) in dst.iter_mut().zip(&xb[t.inp..t.inp + t.n]) {
                        *d += wv * s;
                    }
                } else {
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += wv * xb[t.inp + j * g.stride];
                    }
                }
            });
        }
        return Ok(out);
    }
    let mut out = Vec::with_capacity(g.batch * g.c_out * l);
    let mut cols = vec![T::default(); rows * l];
    for b in 0..g.batch {
        unfold(&x[b * sample..(b + 1) * sample], g, &mut cols);
        out.extend(matmul(kernel, (g.c_out, rows), &cols, (rows, l), (false, false))?);
    }
    Ok(out)
}

/// Gradient with respect to the input for output gradient `grad`.
fn backward_data<T: Float>(kernel: &[T], grad: &[T], g: &Geom) -> candle_core::Result<Vec<T>> {
    let (l, rows) = (g.l(), g.rows());
    let sample = g.c_in * g.h * g.w;
    let mut gx = vec![T::default(); g.batch * sample];
    for b in 0..g.batch {
        let gb = &grad[b * g.c_out * l..(b + 1) * g.c_out * l];
        let gxb = &mut gx[b * sample..(b + 1) * sample];
        if g.use_gemm() {
            let gcols = matmul(kernel, (g.c_out, rows), gb, (g.c_out, l), (true, false))?;
            fold(&gcols, g, gxb);
        } else {
            for_each_tap(g, |t| {
                let wv = kernel[t.widx];
                for (j, &a) in gb[t.out..t.out + t.n].iter().enumerate() {
                    gxb[t.inp + j * g.stride] += wv * a;
                }
            });
        }
    }
    Ok(gx)
}

/// Gradient with respect to the kernel for input `x` and output gradient `grad`.
fn backward_weight<T: Float>(x: &[T], grad: &[T], kernel_len: usize, g: &Geom) -> candle_core::Result<Vec<T>> {
    let (l, rows) = (g.l(), g.rows());
    let sample = g.c_in * g.h * g.w;
    let mut gw = vec![T::default(); kernel_len];
    let mut cols = if g.use_gemm() { vec![T::default(); rows * l] } else { Vec::new() };
    for b in 0..g.batch {
        let xb = &x[b * sample..(b + 1) * sample];
        let gb = &grad[b * g.c_out * l..(b + 1) * g.c_out * l];
        if g.use_gemm() {
            unfold(xb, g, &mut cols);
            let dw = matmul(gb, (g.c_out, l), &cols, (rows, l), (false, true))?;
            for (a, v) in gw.iter_mut().zip(dw) {
                *a += v;
            }
        } else {
            for_each_tap(g, |t| {
                let mut acc = T::default();
                for (j, &a) in gb[t.out..t.out + t.n].iter().enumerate() {
                    acc += a * xb[t.inp + j * g.stride];
                }
                gw[t.widx] += acc;
            });
        }
    }
    Ok(gw)
}

fn flat<T: Float>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

struct Conv2dOp(ConvParams);

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv2d operands must be contiguous".into()))?;
    Ok(&s.as_slice::<T>()?[a..b])
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geom::new(l1.dims(), l2.dims(), self.0)?;
        let shape = Shape::from((g.batch, g.c_out, g.ho, g.wo));
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(contiguous::<f32>(s1, l1)?, contiguous::<f32>(s2, l2)?, &g)?)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(contiguous::<f64>(s1, l1)?, contiguous::<f64>(s2, l2)?, &g)?)
            }
            _ => return Err(candle_core::Error::Msg("conv2d supports matching f32 or f64 operands".into())),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, x: &Tensor, kernel: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = Geom::new(x.dims(), kernel.dims(), self.0)?;
        fn run<T: Float>(x: &Tensor, k: &Tensor, gr: &Tensor, g: &Geom) -> candle_core::Result<(Tensor, Tensor)> {
            let gr = flat::<T>(&gr.to_dtype(x.dtype())?)?;
            let gx = backward_data(&flat::<T>(k)?, &gr, g)?;
            let gw = backward_weight(&flat::<T>(x)?, &gr, k.elem_count(), g)?;
            Ok((
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gw, k.shape(), k.device())?,
            ))
        }
        let (gx, gw) = match x.dtype() {
            DType::F32 => run::<f32>(x, kernel, grad, &g)?,
            DType::F64 => run::<f64>(x, kernel, grad, &g)?,
            dt => return Err(candle_core::Error::Msg(format!("conv2d backward: unsupported dtype {dt:?}"))),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Transposed convolution, computed as the input-gradient of a forward
/// convolution that maps the (larger) output back onto the input grid.
struct ConvTranspose2dOp {
    p: ConvParams,
    out_hw: (usize, usize),
}

impl ConvTranspose2dOp {
    /// Geometry of the adjoint forward convolution.
    fn geom(&self, x: &[usize], kernel: &[usize]) -> candle_core::Result<Geom> {
        let (&[b, c_in, h, w], &[kc, c_out, _, _]) = (x, kernel) else {
            return Err(candle_core::Error::Msg(format!("conv_transpose2d expects rank-4 operands, got {x:?} and {kernel:?}")));
        };
        if kc != c_in {
            return Err(candle_core::Error::Msg(format!("conv_transpose2d: input has {c_in} channels, kernel expects {kc}")));
        }
        let g = Geom::new(&[b, c_out, self.out_hw.0, self.out_hw.1], kernel, self.p)?;
        if (g.ho, g.wo) != (h, w) {
            return Err(candle_core::Error::Msg(format!(
                "conv_transpose2d: output {:?} does not map back onto input {h}x{w}",
                self.out_hw
            )));
        }
        Ok(g)
    }
}

impl CustomOp2 for ConvTranspose2dOp {
    fn name(&self) -> &'static str {
        "im2col-conv-transpose2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom(l1.dims(), l2.dims())?;
        let shape = Shape::from((g.batch, g.c_in, g.h, g.w));
        let storage = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(backward_data(contiguous::<f32>(s2, l2)?, contiguous::<f32>(s1, l1)?, &g)?)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(backward_data(contiguous::<f64>(s2, l2)?, contiguous::<f64>(s1, l1)?, &g)?)
            }
            _ => return Err(candle_core::Error::Msg("conv_transpose2d supports matching f32 or f64 operands".into())),
        };
        Ok((storage, shape))
    }

    fn bwd(&self, x: &Tensor, kernel: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let g = self.geom(x.dims(), kernel.dims())?;
        fn run<T: Float>(x: &Tensor, k: &Tensor, gr: &Tensor, g: &Geom) -> candle_core::Result<(Tensor, Tensor)> {
            let gr = flat::<T>(&gr.to_dtype(x.dtype())?)?;
            let gx = forward(&gr, &flat::<T>(k)?, g)?;
            let gw = backward_weight(&gr, &flat::<T>(x)?, k.elem_count(), g)?;
            Ok((
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gw, k.shape(), k.device())?,
            ))
        }
        let (gx, gw) = match x.dtype() {
            DType::F32 => run::<f32>(x, kernel, grad, &g)?,
            DType::F64 => run::<f64>(x, kernel, grad, &g)?,
            dt => return Err(candle_core::Error::Msg(format!("conv_transpose2d backward: unsupported dtype {dt:?}"))),
        };
        Ok((Some(gx), Some(gw)))
    }
}

/// Convolve `x` (B, C_in, H, W) with `kernel` (C_out, C_in / groups, k, k).
pub fn conv2d(x: &Tensor, kernel: &Tensor, p: ConvParams) -> Result<Tensor> {
    if !x.device().is_cpu() {
        return Ok(x.conv2d(kernel, p.padding, p.stride, p.dilation, p.groups)?);
    }
    Geom::new(x.dims(), kernel.dims(), p).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv2dOp(p))?)
}

/// Transposed convolution of `x` (B, C_in, H, W) with `kernel`
/// (C_in, C_out, k, k). `output_padding` must be smaller than the stride.
pub fn conv_transpose2d(x: &Tensor, kernel: &Tensor, p: ConvParams, output_padding: usize) -> Result<Tensor> {
    if p.groups != 1 {
        return Err(Error::Shape("conv_transpose2d supports a single group".into()));
    }
    if output_padding >= p.stride.max(1) {
        return Err(Error::Shape(format!(
            "output padding {output_padding} must be smaller than stride {}",
            p.stride
        )));
    }
    if !x.device().is_cpu() {
        return Ok(x.conv_transpose2d(kernel, p.padding, output_padding, p.stride, p.dilation)?);
    }
    let (_, _, h, w) = x.dims4()?;
    let k = kernel.dims4()?.2;
    let span = p.dilation * (k.max(1) - 1) + 1;
    let side = |n: usize| ((n.max(1) - 1) * p.stride + span + output_padding).checked_sub(2 * p.padding);
    let (Some(ho), Some(wo)) = (side(h), side(w)) else {
        return Err(Error::Shape(format!("conv_transpose2d: padding {} too large for {h}x{w}", p.padding)));
    };
    let op = ConvTranspose2dOp { p, out_hw: (ho, wo) };
    op.geom(x.dims(), kernel.dims()).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(x.contiguous()?.apply_op2(&kernel.contiguous()?, op)?)
}

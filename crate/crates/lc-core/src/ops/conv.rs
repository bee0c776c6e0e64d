//! Direct/im2col 2-D convolution with stride, zero padding and dilation.
//!
//! The accumulation order per output element is kernel-row-major: input
//! channel, then kernel row, then kernel column. `ExecMode::Deterministic`
//! keeps that order strictly sequential, so results are bit-identical across
//! runs. `ExecMode::Fast` splits the dot product over eight accumulators and
//! may parallelize large layers over output channels.

use rayon::prelude::*;

use crate::error::{LcError, Result};
use crate::exec::ExecMode;
use crate::region::RegionMask;
use crate::tensor::{Elem, Shape4, Tensor};

/// Convolution hyperparameters. Weight layout is (out_c, in_c, kh, kw).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
            padding: 0,
            has_bias: false,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> ConvSpec {
        self.stride = stride;
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> ConvSpec {
        self.dilation = dilation;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> ConvSpec {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self, has_bias: bool) -> ConvSpec {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(LcError::config("channel counts must be positive"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(LcError::config("kernel dims must be positive"));
        }
        if self.stride == 0 {
            return Err(LcError::config("stride must be positive"));
        }
        if self.dilation == 0 {
            return Err(LcError::config("dilation must be positive"));
        }
        Ok(())
    }

    /// Output spatial size: floor((d + 2*pad - dil*(k-1) - 1)/stride) + 1.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let dim = |d: usize, k: usize| -> Result<usize> {
            let span = self.dilation * (k - 1) + 1;
            let padded = d + 2 * self.padding;
            if padded < span {
                return Err(LcError::config(format!(
                    "non-positive output size: input {} with padding {} smaller than \
                     dilated kernel span {}",
                    d, self.padding, span
                )));
            }
            Ok((padded - span) / self.stride + 1)
        };
        Ok((dim(h, self.kernel.0)?, dim(w, self.kernel.1)?))
    }

    pub fn weight_shape(&self) -> Shape4 {
        Shape4::new(
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        )
    }

    /// Elements of one im2col patch: in_c * kh * kw.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
}

// Parallelize a conv only when it is worth the dispatch overhead.
const PAR_MIN_MACS: usize = 1 << 22;

#[inline]
fn dot_seq<T: Elem>(a: &[T], b: &[T]) -> T {
    let mut acc = T::ZERO;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += *x * *y;
    }
    acc
}

#[inline]
fn dot_fast<T: Elem>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let lanes = n / 8 * 8;
    let mut acc = [T::ZERO; 8];
    let mut i = 0;
    while i < lanes {
        let ca = &a[i..i + 8];
        let cb = &b[i..i + 8];
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
        i += 8;
    }
    let mut s = T::ZERO;
    for l in 0..8 {
        s += acc[l];
    }
    for j in lanes..n {
        s += a[j] * b[j];
    }
    s
}

#[inline]
fn dot<T: Elem>(a: &[T], b: &[T], mode: ExecMode) -> T {
    match mode {
        ExecMode::Deterministic => dot_seq(a, b),
        ExecMode::Fast => dot_fast(a, b),
    }
}

#[inline]
fn axpy<T: Elem>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o += alpha * *v;
    }
}

fn check_weight<T: Elem>(spec: &ConvSpec, weights: &Tensor<T>) -> Result<()> {
    if weights.shape() != spec.weight_shape() {
        return Err(LcError::shape(format!(
            "weight shape {} does not match spec {}",
            weights.shape(),
            spec.weight_shape()
        )));
    }
    Ok(())
}

fn check_bias<T: Elem>(spec: &ConvSpec, bias: Option<&[T]>) -> Result<()> {
    match (spec.has_bias, bias) {
        (true, Some(b)) if b.len() == spec.out_channels => Ok(()),
        (true, Some(b)) => Err(LcError::shape(format!(
            "bias length {} does not match {} output channels",
            b.len(),
            spec.out_channels
        ))),
        (true, None) => Err(LcError::config("spec declares a bias but none was given")),
        (false, Some(_)) => Err(LcError::config("spec declares no bias but one was given")),
        (false, None) => Ok(()),
    }
}

/// Fill im2col patches for the given output positions of image `n`.
///
/// Out-of-bounds reads are zero (zero padding). When `mask` is given, input
/// pixels outside the mask also read zero; this is how region convolution
/// sees the feature map.
pub(crate) fn im2col_rows<T: Elem>(
    x: &Tensor<T>,
    n: usize,
    spec: &ConvSpec,
    positions: &[(usize, usize)],
    mask: Option<&RegionMask>,
    col: &mut [T],
) {
    let (kh, kw) = spec.kernel;
    let (h, w) = (x.shape().h, x.shape().w);
    let k_len = spec.patch_len();
    debug_assert_eq!(col.len(), positions.len() * k_len);
    for (p, &(oy, ox)) in positions.iter().enumerate() {
        let row = &mut col[p * k_len..(p + 1) * k_len];
        let mut k = 0;
        for ic in 0..spec.in_channels {
            let plane = x.plane(n, ic);
            for ki in 0..kh {
                let iy = (oy * spec.stride + ki * spec.dilation) as isize - spec.padding as isize;
                if iy < 0 || iy >= h as isize {
                    for _ in 0..kw {
                        row[k] = T::ZERO;
                        k += 1;
                    }
                    continue;
                }
                let iy = iy as usize;
                for kj in 0..kw {
                    let ix =
                        (ox * spec.stride + kj * spec.dilation) as isize - spec.padding as isize;
                    row[k] = if ix < 0 || ix >= w as isize {
                        T::ZERO
                    } else {
                        let ix = ix as usize;
                        match mask {
                            Some(m) if !m.get(iy, ix) => T::ZERO,
                            _ => plane[iy * w + ix],
                        }
                    };
                    k += 1;
                }
            }
        }
    }
}

/// Matrix product of weight rows against im2col rows, scattered to the given
/// output positions. Shared by dense and region convolution.
pub(crate) fn matmul_scatter<T: Elem>(
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    col: &[T],
    positions: &[(usize, usize)],
    out: &mut Tensor<T>,
    n: usize,
    mode: ExecMode,
) {
    let oc_count = weights.shape().n;
    let k_len = weights.shape().c * weights.shape().h * weights.shape().w;
    let ow = out.shape().w;
    let macs = oc_count * positions.len() * k_len;

    let compute_plane = |oc: usize, plane: &mut [T]| {
        let wrow = weights.plane_range(oc, k_len);
        let b = bias.map(|b| b[oc]).unwrap_or(T::ZERO);
        for (p, &(oy, ox)) in positions.iter().enumerate() {
            let v = dot(wrow, &col[p * k_len..(p + 1) * k_len], mode) + b;
            plane[oy * ow + ox] = v;
        }
    };

    if mode == ExecMode::Fast && macs >= PAR_MIN_MACS {
        let hw = out.shape().h * out.shape().w;
        let base = out.idx(n, 0, 0, 0);
        let planes = &mut out.data_mut()[base..base + oc_count * hw];
        planes
            .par_chunks_exact_mut(hw)
            .enumerate()
            .for_each(|(oc, plane)| compute_plane(oc, plane));
    } else {
        for oc in 0..oc_count {
            compute_plane(oc, out.plane_mut(n, oc));
        }
    }
}

impl<T: Elem> Tensor<T> {
    /// First `len` elements of row `i` when viewing the tensor as a matrix of
    /// n rows by (c*h*w) columns. Used for weight rows.
    pub(crate) fn plane_range(&self, i: usize, len: usize) -> &[T] {
        let row = self.shape().c * self.shape().h * self.shape().w;
        &self.data()[i * row..i * row + len]
    }
}

pub(crate) fn all_positions(oh: usize, ow: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            v.push((oy, ox));
        }
    }
    v
}

/// Dense 2-D convolution.
pub fn conv2d_forward<T: Elem>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    mode: ExecMode,
) -> Result<Tensor<T>> {
    check_weight(spec, weights)?;
    check_bias(spec, bias)?;
    let xs = x.shape();
    if xs.c != spec.in_channels {
        return Err(LcError::config(format!(
            "input has {} channels, spec expects {}",
            xs.c, spec.in_channels
        )));
    }
    let (oh, ow) = spec.out_hw(xs.h, xs.w)?;
    let mut out = Tensor::zeros(Shape4::new(xs.n, spec.out_channels, oh, ow));
    let positions = all_positions(oh, ow);
    let mut col = vec![T::ZERO; positions.len() * spec.patch_len()];
    for n in 0..xs.n {
        im2col_rows(x, n, spec, &positions, None, &mut col);
        matmul_scatter(weights, bias, &col, &positions, &mut out, n, mode);
    }
    Ok(out)
}

/// Backward pass of dense convolution.
///
/// Returns (grad_x, grad_w, grad_b); grad_b is `Some` iff the spec has a
/// bias. Gradients match central finite differences of the forward map.
pub fn conv2d_backward<T: Elem>(
    grad_out: &Tensor<T>,
    saved_x: &Tensor<T>,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    mode: ExecMode,
) -> Result<(Tensor<T>, Tensor<T>, Option<Vec<T>>)> {
    check_weight(spec, weights)?;
    let xs = saved_x.shape();
    let (oh, ow) = spec.out_hw(xs.h, xs.w)?;
    let expect = Shape4::new(xs.n, spec.out_channels, oh, ow);
    if grad_out.shape() != expect {
        return Err(LcError::shape(format!(
            "grad_out shape {} does not match forward output {}",
            grad_out.shape(),
            expect
        )));
    }

    let positions = all_positions(oh, ow);
    let mut col = vec![T::ZERO; positions.len() * spec.patch_len()];
    let mut grad_w = Tensor::zeros(spec.weight_shape());
    let mut grad_b = spec.has_bias.then(|| vec![T::ZERO; spec.out_channels]);
    let mut grad_x = Tensor::zeros(xs);

    for n in 0..xs.n {
        im2col_rows(saved_x, n, spec, &positions, None, &mut col);
        accumulate_grad_w(grad_out, n, spec, &positions, &col, &mut grad_w, mode);
        if let Some(gb) = grad_b.as_mut() {
            accumulate_grad_b(grad_out, n, &positions, gb);
        }
        grad_input_into(grad_out, n, spec, weights, None, &mut grad_x, mode);
    }
    Ok((grad_x, grad_w, grad_b))
}

pub(crate) fn accumulate_grad_w<T: Elem>(
    grad_out: &Tensor<T>,
    n: usize,
    spec: &ConvSpec,
    positions: &[(usize, usize)],
    col: &[T],
    grad_w: &mut Tensor<T>,
    mode: ExecMode,
) {
    let k_len = spec.patch_len();
    let ow = grad_out.shape().w;
    let macs = spec.out_channels * positions.len() * k_len;
    let run = |oc: usize, gw_row: &mut [T]| {
        let gplane = grad_out.plane(n, oc);
        for (p, &(oy, ox)) in positions.iter().enumerate() {
            let g = gplane[oy * ow + ox];
            if g != T::ZERO {
                axpy(g, &col[p * k_len..(p + 1) * k_len], gw_row);
            }
        }
    };
    if mode == ExecMode::Fast && macs >= PAR_MIN_MACS {
        grad_w
            .data_mut()
            .par_chunks_exact_mut(k_len)
            .enumerate()
            .for_each(|(oc, row)| run(oc, row));
    } else {
        for oc in 0..spec.out_channels {
            let row = &mut grad_w.data_mut()[oc * k_len..(oc + 1) * k_len];
            run(oc, row);
        }
    }
}

pub(crate) fn accumulate_grad_b<T: Elem>(
    grad_out: &Tensor<T>,
    n: usize,
    positions: &[(usize, usize)],
    grad_b: &mut [T],
) {
    let ow = grad_out.shape().w;
    for (oc, gb) in grad_b.iter_mut().enumerate() {
        let gplane = grad_out.plane(n, oc);
        for &(oy, ox) in positions {
            *gb += gplane[oy * ow + ox];
        }
    }
}

/// Accumulate the input gradient of image `n` into `grad_x`.
///
/// Each input pixel's gradient is an independent sum over (out_channel,
/// kernel row, kernel column), so the order is fixed regardless of
/// threading. When `mask` is given, gradient only flows between masked
/// input and masked output positions (the region-convolution adjoint).
pub(crate) fn grad_input_into<T: Elem>(
    grad_out: &Tensor<T>,
    n: usize,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    mask: Option<&RegionMask>,
    grad_x: &mut Tensor<T>,
    mode: ExecMode,
) {
    let (kh, kw) = spec.kernel;
    let gs = grad_out.shape();
    let xs = grad_x.shape();
    let (h, w) = (xs.h, xs.w);
    let k_len = kh * kw;
    let wrow_len = spec.in_channels * k_len;

    let row_job = |ic: usize, iy: usize, out_row: &mut [T]| {
        for (ix, out_v) in out_row.iter_mut().enumerate() {
            if let Some(m) = mask {
                if !m.get(iy, ix) {
                    continue;
                }
            }
            let mut acc = T::ZERO;
            for oc in 0..spec.out_channels {
                let wplane = &weights.plane_range(oc, wrow_len)[ic * k_len..(ic + 1) * k_len];
                let gplane = grad_out.plane(n, oc);
                for ki in 0..kh {
                    let num_y = iy + spec.padding;
                    if num_y < ki * spec.dilation {
                        continue;
                    }
                    let oy_num = num_y - ki * spec.dilation;
                    if oy_num % spec.stride != 0 {
                        continue;
                    }
                    let oy = oy_num / spec.stride;
                    if oy >= gs.h {
                        continue;
                    }
                    for kj in 0..kw {
                        let num_x = ix + spec.padding;
                        if num_x < kj * spec.dilation {
                            continue;
                        }
                        let ox_num = num_x - kj * spec.dilation;
                        if ox_num % spec.stride != 0 {
                            continue;
                        }
                        let ox = ox_num / spec.stride;
                        if ox >= gs.w {
                            continue;
                        }
                        if let Some(m) = mask {
                            if !m.get(oy, ox) {
                                continue;
                            }
                        }
                        acc += wplane[ki * kw + kj] * gplane[oy * gs.w + ox];
                    }
                }
            }
            *out_v += acc;
        }
    };

    let macs = h * w * spec.out_channels * k_len * spec.in_channels;
    if mode == ExecMode::Fast && macs >= PAR_MIN_MACS {
        let base = grad_x.idx(n, 0, 0, 0);
        let chw = xs.c * h * w;
        grad_x.data_mut()[base..base + chw]
            .par_chunks_exact_mut(w)
            .enumerate()
            .for_each(|(row_idx, out_row)| {
                let ic = row_idx / h;
                let iy = row_idx % h;
                row_job(ic, iy, out_row);
            });
    } else {
        for ic in 0..spec.in_channels {
            for iy in 0..h {
                let base = grad_x.idx(n, ic, iy, 0);
                let data = grad_x.data_mut();
                row_job(ic, iy, &mut data[base..base + w]);
            }
        }
    }
}

//! Region convolution: convolution evaluated only at the active pixels of a
//! binary mask, with inactive inputs read as zero. This is what lets later
//! cascade stages spend compute only on forwarded pixels.

use crate::error::{LcError, Result};
use crate::exec::ExecMode;
use crate::ops::conv::{
    accumulate_grad_b, accumulate_grad_w, conv2d_backward, conv2d_forward, grad_input_into,
    im2col_rows, matmul_scatter, ConvSpec,
};
use crate::tensor::{Elem, Shape4, Tensor};

/// Above this active-pixel density the gather path costs more than it saves
/// and region convolution falls back to dense convolution plus masking.
pub const RC_DENSE_FALLBACK_DENSITY: f64 = 0.75;

/// Binary h x w grid of active pixels with a cached population count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
    active: usize,
}

impl RegionMask {
    pub fn empty(h: usize, w: usize) -> RegionMask {
        RegionMask {
            h,
            w,
            bits: vec![false; h * w],
            active: 0,
        }
    }

    pub fn full(h: usize, w: usize) -> RegionMask {
        RegionMask {
            h,
            w,
            bits: vec![true; h * w],
            active: h * w,
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> RegionMask {
        let mut m = RegionMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                if f(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.active == 0
    }

    pub fn is_full(&self) -> bool {
        self.active == self.len()
    }

    pub fn active_count(&self) -> usize {
        self.active
    }

    pub fn density(&self) -> f64 {
        if self.len() == 0 {
            0.0
        } else {
            self.active as f64 / self.len() as f64
        }
    }

    #[inline(always)]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        let i = y * self.w + x;
        if self.bits[i] != v {
            self.bits[i] = v;
            if v {
                self.active += 1;
            } else {
                self.active -= 1;
            }
        }
    }

    pub fn complement(&self) -> RegionMask {
        RegionMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|b| !b).collect(),
            active: self.len() - self.active,
        }
    }

    /// Active pixels in row-major scan order.
    pub fn active_positions(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::with_capacity(self.active);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.bits[y * self.w + x] {
                    v.push((y, x));
                }
            }
        }
        v
    }

    pub fn iter_bits(&self) -> impl Iterator<Item = bool> + '_ {
        self.bits.iter().copied()
    }

    pub fn intersects(&self, other: &RegionMask) -> bool {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .any(|(a, b)| *a && *b)
    }

    /// Set difference: self minus other.
    pub fn minus(&self, other: &RegionMask) -> RegionMask {
        debug_assert_eq!(self.dims(), other.dims());
        let bits: Vec<bool> = self
            .bits
            .iter()
            .zip(other.bits.iter())
            .map(|(a, b)| *a && !*b)
            .collect();
        let active = bits.iter().filter(|b| **b).count();
        RegionMask {
            h: self.h,
            w: self.w,
            bits,
            active,
        }
    }
}

/// Zero every element of `x` (one image, all channels) outside the mask.
pub fn mask_zero_outside<T: Elem>(x: &Tensor<T>, mask: &RegionMask) -> Tensor<T> {
    let s = x.shape();
    debug_assert_eq!((s.h, s.w), mask.dims());
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = out.plane_mut(n, c);
            for (i, keep) in mask.iter_bits().enumerate() {
                if !keep {
                    plane[i] = T::ZERO;
                }
            }
        }
    }
    out
}

fn check_rc_dims<T: Elem>(x: &Tensor<T>, mask: &RegionMask, spec: &ConvSpec) -> Result<()> {
    let s = x.shape();
    if (s.h, s.w) != mask.dims() {
        return Err(LcError::config(format!(
            "mask dims {:?} do not match input spatial dims ({}, {})",
            mask.dims(),
            s.h,
            s.w
        )));
    }
    if spec.stride != 1 {
        return Err(LcError::config(
            "region convolution requires stride 1; masks live at a single resolution",
        ));
    }
    let (oh, ow) = spec.out_hw(s.h, s.w)?;
    if (oh, ow) != (s.h, s.w) {
        return Err(LcError::config(format!(
            "region convolution must preserve spatial dims: got {}x{} from {}x{} \
             (padding must equal dilation*(kernel-1)/2)",
            oh, ow, s.h, s.w
        )));
    }
    if s.c != spec.in_channels {
        return Err(LcError::config(format!(
            "input has {} channels, spec expects {}",
            s.c, spec.in_channels
        )));
    }
    Ok(())
}

/// Convolution restricted to the active pixels of `mask`.
///
/// Output equals the dense convolution of the masked input at active pixels
/// and zero elsewhere; inactive neighbors read as zero inside every window.
/// Compute cost is proportional to the active-pixel count (above
/// [`RC_DENSE_FALLBACK_DENSITY`] a dense fallback is cheaper and is used
/// instead; both paths produce identical values).
pub fn region_conv_forward<T: Elem>(
    x: &Tensor<T>,
    mask: &RegionMask,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    mode: ExecMode,
) -> Result<Tensor<T>> {
    check_rc_dims(x, mask, spec)?;
    let s = x.shape();

    if mask.density() > RC_DENSE_FALLBACK_DENSITY {
        let masked = mask_zero_outside(x, mask);
        let dense = conv2d_forward(&masked, spec, weights, bias, mode)?;
        return Ok(mask_zero_outside(&dense, mask));
    }

    let mut out = Tensor::zeros(Shape4::new(s.n, spec.out_channels, s.h, s.w));
    if mask.is_empty() {
        return Ok(out);
    }
    let positions = mask.active_positions();
    let mut col = vec![T::ZERO; positions.len() * spec.patch_len()];
    for n in 0..s.n {
        im2col_rows(x, n, spec, &positions, Some(mask), &mut col);
        matmul_scatter(weights, bias, &col, &positions, &mut out, n, mode);
    }
    Ok(out)
}

/// Backward pass of region convolution: the adjoint of mask -> dense conv ->
/// mask, so grad_x is exactly zero outside the mask.
pub fn region_conv_backward<T: Elem>(
    grad_out: &Tensor<T>,
    saved_x: &Tensor<T>,
    mask: &RegionMask,
    spec: &ConvSpec,
    weights: &Tensor<T>,
    mode: ExecMode,
) -> Result<(Tensor<T>, Tensor<T>, Option<Vec<T>>)> {
    check_rc_dims(saved_x, mask, spec)?;
    let s = saved_x.shape();
    if grad_out.shape() != Shape4::new(s.n, spec.out_channels, s.h, s.w) {
        return Err(LcError::shape(format!(
            "grad_out shape {} does not match region conv output",
            grad_out.shape()
        )));
    }

    if mask.density() > RC_DENSE_FALLBACK_DENSITY {
        let masked_g = mask_zero_outside(grad_out, mask);
        let masked_x = mask_zero_outside(saved_x, mask);
        let (gx, gw, gb) = conv2d_backward(&masked_g, &masked_x, spec, weights, mode)?;
        return Ok((mask_zero_outside(&gx, mask), gw, gb));
    }

    let mut grad_w = Tensor::zeros(spec.weight_shape());
    let mut grad_b = spec.has_bias.then(|| vec![T::ZERO; spec.out_channels]);
    let mut grad_x = Tensor::zeros(s);
    if mask.is_empty() {
        return Ok((grad_x, grad_w, grad_b));
    }

    let positions = mask.active_positions();
    let mut col = vec![T::ZERO; positions.len() * spec.patch_len()];
    for n in 0..s.n {
        im2col_rows(saved_x, n, spec, &positions, Some(mask), &mut col);
        accumulate_grad_w(grad_out, n, spec, &positions, &col, &mut grad_w, mode);
        if let Some(gb) = grad_b.as_mut() {
            accumulate_grad_b(grad_out, n, &positions, gb);
        }
        grad_input_into(grad_out, n, spec, weights, Some(mask), &mut grad_x, mode);
    }
    Ok((grad_x, grad_w, grad_b))
}

/// y = x everywhere, plus body_out added at active pixels. The complement of
/// the mask is a bit-level copy of x.
pub fn masked_add<T: Elem>(x: &Tensor<T>, body_out: &Tensor<T>, mask: &RegionMask) -> Tensor<T> {
    let s = x.shape();
    debug_assert_eq!(s, body_out.shape());
    debug_assert_eq!((s.h, s.w), mask.dims());
    let mut out = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let bo = body_out.plane(n, c);
            let plane = out.plane_mut(n, c);
            for (i, active) in mask.iter_bits().enumerate() {
                if active {
                    plane[i] = plane[i] + bo[i];
                }
            }
        }
    }
    out
}

/// Split `active` into pixels that exit now (max class probability >= rho)
/// and pixels forwarded to the next stage.
///
/// rho = 1.0 is special-cased to "no exits": rounded-up probabilities must
/// not reject pixels when routing is disabled.
pub fn mask_from_confidence<T: Elem>(
    probs: &Tensor<T>,
    rho: f64,
    active: &RegionMask,
) -> Result<(RegionMask, RegionMask)> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(LcError::config(format!("rho must be in (0, 1], got {rho}")));
    }
    let s = probs.shape();
    if s.n != 1 {
        return Err(LcError::config("confidence routing expects batch size 1"));
    }
    if (s.h, s.w) != active.dims() {
        return Err(LcError::config(
            "probs spatial dims do not match the active mask",
        ));
    }
    if rho == 1.0 {
        return Ok((RegionMask::empty(s.h, s.w), active.clone()));
    }
    let mut exit = RegionMask::empty(s.h, s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            if !active.get(y, x) {
                continue;
            }
            let mut best = probs.at(0, 0, y, x);
            for c in 1..s.c {
                let v = probs.at(0, c, y, x);
                if v > best {
                    best = v;
                }
            }
            if best.to_f64() >= rho {
                exit.set(y, x, true);
            }
        }
    }
    let forward = active.minus(&exit);
    Ok((exit, forward))
}

/// Analytic multiply-accumulate count of a convolution evaluated at
/// `active_count` output pixels: 2*kh*kw*in_c*out_c per pixel, plus out_c
/// per pixel when biased.
pub fn flop_count(spec: &ConvSpec, active_count: usize) -> u64 {
    let macs = 2
        * spec.kernel.0 as u64
        * spec.kernel.1 as u64
        * spec.in_channels as u64
        * spec.out_channels as u64
        * active_count as u64;
    let bias = if spec.has_bias {
        spec.out_channels as u64 * active_count as u64
    } else {
        0
    };
    macs + bias
}

pub use crate::ops::conv::ConvSpec as RcSpec;

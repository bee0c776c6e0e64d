//! Frozen batch-norm realized as a per-channel affine transform.
//!
//! Normalization statistics are never computed: scale and shift are plain
//! parameters initialized to identity and frozen by default, which keeps
//! small-batch training stable.

use crate::error::{LcError, Result};
use crate::tensor::{Elem, Shape4, Tensor};

/// Per-channel y = scale[c] * x + shift[c].
#[derive(Debug, Clone, PartialEq)]
pub struct AffineNorm<T: Elem> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub frozen: bool,
}

impl<T: Elem> AffineNorm<T> {
    /// Identity transform (scale 1, shift 0), frozen.
    pub fn identity(channels: usize) -> AffineNorm<T> {
        AffineNorm {
            scale: Tensor::filled(Shape4::new(1, channels, 1, 1), T::ONE),
            shift: Tensor::zeros(Shape4::new(1, channels, 1, 1)),
            frozen: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.shape().c
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != self.channels() {
            return Err(LcError::config(format!(
                "affine norm has {} channels, input has {}",
                self.channels(),
                s.c
            )));
        }
        let mut out = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let a = self.scale.data()[c];
                let b = self.shift.data()[c];
                for v in out.plane_mut(n, c) {
                    *v = a * *v + b;
                }
            }
        }
        Ok(out)
    }

    /// Returns grad_x; when not frozen also (grad_scale, grad_shift).
    pub fn backward(
        &self,
        grad_out: &Tensor<T>,
        saved_x: &Tensor<T>,
    ) -> (Tensor<T>, Option<(Vec<T>, Vec<T>)>) {
        let s = saved_x.shape();
        let mut grad_x = grad_out.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let a = self.scale.data()[c];
                for v in grad_x.plane_mut(n, c) {
                    *v = a * *v;
                }
            }
        }
        if self.frozen {
            return (grad_x, None);
        }
        let mut gs = vec![T::ZERO; s.c];
        let mut gb = vec![T::ZERO; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let go = grad_out.plane(n, c);
                let xp = saved_x.plane(n, c);
                for (g, x) in go.iter().zip(xp.iter()) {
                    gs[c] += *g * *x;
                    gb[c] += *g;
                }
            }
        }
        (grad_x, Some((gs, gb)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_a_no_op() {
        let x = Tensor::from_vec(Shape4::new(1, 2, 1, 2), vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let norm: AffineNorm<f64> = AffineNorm::identity(2);
        assert_eq!(norm.apply(&x).unwrap().data(), x.data());
    }

    #[test]
    fn scales_and_shifts_per_channel() {
        let x = Tensor::from_vec(Shape4::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut norm: AffineNorm<f64> = AffineNorm::identity(2);
        norm.scale.data_mut()[0] = 2.0;
        norm.shift.data_mut()[1] = -1.0;
        let y = norm.apply(&x).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 2.0, 3.0]);
    }

    #[test]
    fn frozen_backward_has_no_param_grads() {
        let x = Tensor::from_vec(Shape4::new(1, 1, 1, 2), vec![1.0, 2.0]).unwrap();
        let mut norm: AffineNorm<f64> = AffineNorm::identity(1);
        norm.scale.data_mut()[0] = 3.0;
        let g = Tensor::filled(x.shape(), 1.0);
        let (gx, params) = norm.backward(&g, &x);
        assert_eq!(gx.data(), &[3.0, 3.0]);
        assert!(params.is_none());
        norm.frozen = false;
        let (_, params) = norm.backward(&g, &x);
        let (gs, gb) = params.unwrap();
        assert_eq!(gs, vec![3.0]);
        assert_eq!(gb, vec![2.0]);
    }
}

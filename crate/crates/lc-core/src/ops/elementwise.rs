//! Elementwise plumbing: relu, tensor addition, channel concatenation.

use crate::error::{LcError, Result};
use crate::tensor::{Elem, Shape4, Tensor};

pub fn relu_forward<T: Elem>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
    out
}

/// dL/dx = grad_out where x > 0, else 0.
pub fn relu_backward<T: Elem>(grad_out: &Tensor<T>, saved_x: &Tensor<T>) -> Tensor<T> {
    debug_assert_eq!(grad_out.shape(), saved_x.shape());
    let mut out = grad_out.clone();
    for (g, x) in out.data_mut().iter_mut().zip(saved_x.data().iter()) {
        if !(*x > T::ZERO) {
            *g = T::ZERO;
        }
    }
    out
}

pub fn elementwise_add<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(LcError::shape(format!(
            "elementwise_add shapes {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data().iter()) {
        *o = *o + *v;
    }
    Ok(out)
}

/// Concatenate along the channel axis; all other dims must agree.
pub fn channel_concat<T: Elem>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(LcError::config("channel_concat needs at least one tensor"));
    }
    let first = parts[0].shape();
    let mut c_total = 0;
    for p in parts {
        let s = p.shape();
        if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
            return Err(LcError::shape(format!(
                "channel_concat dims {} vs {}",
                s, first
            )));
        }
        c_total += s.c;
    }
    let mut out = Tensor::zeros(Shape4::new(first.n, c_total, first.h, first.w));
    for n in 0..first.n {
        let mut c_off = 0;
        for p in parts {
            for c in 0..p.shape().c {
                out.plane_mut(n, c_off + c).copy_from_slice(p.plane(n, c));
            }
            c_off += p.shape().c;
        }
    }
    Ok(out)
}

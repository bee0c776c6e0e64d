//! Masked pixel-wise cross-entropy.
//!
//! The loss is the mean of -log p[target] over pixels that are inside the
//! contributing mask and not ignore-labeled. The returned gradient is with
//! respect to the logits feeding the softmax (the usual p - onehot form,
//! scaled by 1/count) and is exactly 0.0 at every non-contributing pixel,
//! which is what restricts each cascade stage's supervision to its own
//! region.

use crate::error::{LcError, Result};
use crate::label::LabelMap;
use crate::region::RegionMask;
use crate::tensor::{Elem, Tensor};

/// Returns (loss, grad_logits). An empty contributing set is not an error:
/// a late stage can legitimately receive zero forwarded pixels, so the loss
/// is 0 with an all-zero gradient.
pub fn masked_cross_entropy<T: Elem>(
    probs: &Tensor<T>,
    targets: &LabelMap,
    contrib: &RegionMask,
    ignore_label: u8,
) -> Result<(f64, Tensor<T>)> {
    let s = probs.shape();
    if s.n != 1 {
        return Err(LcError::config("masked_cross_entropy expects batch size 1"));
    }
    if targets.dims() != (s.h, s.w) || contrib.dims() != (s.h, s.w) {
        return Err(LcError::shape(format!(
            "targets {:?} / mask {:?} do not match probs spatial dims ({}, {})",
            targets.dims(),
            contrib.dims(),
            s.h,
            s.w
        )));
    }

    let mut count = 0usize;
    for y in 0..s.h {
        for x in 0..s.w {
            if contrib.get(y, x) && targets.get(y, x) != ignore_label {
                let t = targets.get(y, x) as usize;
                if t >= s.c {
                    return Err(LcError::config(format!(
                        "target class {} out of range for {} channels",
                        t, s.c
                    )));
                }
                count += 1;
            }
        }
    }

    let mut grad = Tensor::zeros(s);
    if count == 0 {
        return Ok((0.0, grad));
    }

    let inv = T::from_f64(1.0 / count as f64);
    let tiny = T::from_f64(1e-30);
    let mut loss = 0.0f64;
    for y in 0..s.h {
        for x in 0..s.w {
            if !contrib.get(y, x) || targets.get(y, x) == ignore_label {
                continue;
            }
            let t = targets.get(y, x) as usize;
            let p_t = probs.at(0, t, y, x);
            loss -= p_t.max_elem(tiny).ln().to_f64();
            for c in 0..s.c {
                let p = probs.at(0, c, y, x);
                let onehot = if c == t { T::ONE } else { T::ZERO };
                grad.set(0, c, y, x, (p - onehot) * inv);
            }
        }
    }
    Ok((loss / count as f64, grad))
}

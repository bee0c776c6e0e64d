//! Per-pixel channel softmax with max subtraction for stability.

use crate::error::{LcError, Result};
use crate::tensor::{Elem, Tensor};

/// Softmax over the channel axis, independently per (batch, y, x).
pub fn softmax_channels<T: Elem>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.c < 2 {
        return Err(LcError::config("softmax needs at least 2 channels"));
    }
    let mut out = logits.clone();
    let hw = s.h * s.w;
    let chan_stride = hw;
    for n in 0..s.n {
        let base = out.idx(n, 0, 0, 0);
        let block = &mut out.data_mut()[base..base + s.c * hw];
        for p in 0..hw {
            let mut m = block[p];
            for c in 1..s.c {
                let v = block[c * chan_stride + p];
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::ZERO;
            for c in 0..s.c {
                let e = (block[c * chan_stride + p] - m).exp();
                block[c * chan_stride + p] = e;
                sum += e;
            }
            for c in 0..s.c {
                block[c * chan_stride + p] = block[c * chan_stride + p] / sum;
            }
        }
    }
    Ok(out)
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_channels<T: Elem>(probs: &Tensor<T>, n: usize, y: usize, x: usize) -> (usize, T) {
    let s = probs.shape();
    let mut best_c = 0;
    let mut best = probs.at(n, 0, y, x);
    for c in 1..s.c {
        let v = probs.at(n, c, y, x);
        if v > best {
            best = v;
            best_c = c;
        }
    }
    (best_c, best)
}

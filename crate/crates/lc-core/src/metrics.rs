//! Evaluation: confusion matrix / mIoU, difficulty partition (easy,
//! moderate, extremely-hard pixel sets), boundary statistics, and per-class
//! stage distribution.

use crate::error::{LcError, Result};
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::region::RegionMask;
use crate::tensor::{Elem, Tensor};

/// K x K counts; rows are ground truth, columns predictions. Ignore pixels
/// are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            k: class_count,
            counts: vec![0; class_count * class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, gt: u8, pred: u8) {
        if gt == IGNORE_LABEL {
            return;
        }
        debug_assert!((gt as usize) < self.k && (pred as usize) < self.k);
        self.counts[gt as usize * self.k + pred as usize] += 1;
    }

    pub fn add_maps(&mut self, gt: &LabelMap, pred: &LabelMap) {
        debug_assert_eq!(gt.dims(), pred.dims());
        for (g, p) in gt.data().iter().zip(pred.data().iter()) {
            self.add(*g, *p);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        debug_assert_eq!(self.k, other.k);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class IoU (None for classes absent from both prediction and ground
/// truth) and their mean.
pub fn miou(conf: &ConfusionMatrix) -> Result<(Vec<Option<f64>>, f64)> {
    if conf.total() == 0 {
        return Err(LcError::Metric(
            "confusion matrix is empty: no evaluated pixels".into(),
        ));
    }
    let k = conf.class_count();
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..k {
        let tp = conf.get(c, c);
        let fp: u64 = (0..k).filter(|&g| g != c).map(|g| conf.get(g, c)).sum();
        let f_n: u64 = (0..k).filter(|&p| p != c).map(|p| conf.get(c, p)).sum();
        let denom = tp + fp + f_n;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            n += 1;
        }
    }
    if n == 0 {
        return Err(LcError::Metric("no class has a nonzero denominator".into()));
    }
    Ok((per_class, sum / n as f64))
}

/// Disjoint difficulty sets at a confidence threshold (default 0.95):
/// easy = confidently correct, extremely hard = confidently wrong,
/// moderate = everything below the threshold. Ignore pixels belong to none.
#[derive(Debug, Clone)]
pub struct DifficultyPartition {
    pub es: RegionMask,
    pub ms: RegionMask,
    pub hs: RegionMask,
    pub threshold: f64,
}

pub const DIFFICULTY_THRESHOLD: f64 = 0.95;

/// Partition from per-pixel confidences and predicted labels. The threshold
/// comparison is strict (> threshold counts as confident).
pub fn difficulty_partition_scored(
    confidence: &[f64],
    pred: &LabelMap,
    labels: &LabelMap,
    threshold: f64,
) -> DifficultyPartition {
    let (h, w) = labels.dims();
    debug_assert_eq!(pred.dims(), (h, w));
    debug_assert_eq!(confidence.len(), h * w);
    let mut es = RegionMask::empty(h, w);
    let mut ms = RegionMask::empty(h, w);
    let mut hs = RegionMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let gt = labels.get(y, x);
            if gt == IGNORE_LABEL {
                continue;
            }
            let c = confidence[y * w + x];
            let correct = pred.get(y, x) == gt;
            if c > threshold {
                if correct {
                    es.set(y, x, true);
                } else {
                    hs.set(y, x, true);
                }
            } else {
                ms.set(y, x, true);
            }
        }
    }
    DifficultyPartition {
        es,
        ms,
        hs,
        threshold,
    }
}

/// Partition straight from a probability tensor (batch 1).
pub fn difficulty_partition<T: Elem>(
    probs: &Tensor<T>,
    labels: &LabelMap,
    threshold: f64,
) -> DifficultyPartition {
    let s = probs.shape();
    debug_assert_eq!(s.n, 1);
    let (h, w) = (s.h, s.w);
    let mut conf = vec![0.0f64; h * w];
    let mut pred = LabelMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (c, p) = crate::ops::softmax::argmax_channels(probs, 0, y, x);
            pred.set(y, x, c as u8);
            conf[y * w + x] = p.to_f64();
        }
    }
    difficulty_partition_scored(&conf, &pred, labels, threshold)
}

/// (pixels of `mask` within Chebyshev distance `radius` of a label change,
/// total mask pixels). Ignore labels count as changes.
pub fn boundary_hits(mask: &RegionMask, labels: &LabelMap, radius: usize) -> (u64, u64) {
    assert!(radius >= 1, "radius must be at least 1");
    let (h, w) = labels.dims();
    debug_assert_eq!(mask.dims(), (h, w));
    let r = radius as i64;
    let mut hits = 0u64;
    let mut total = 0u64;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            total += 1;
            let here = labels.get(y, x);
            let mut near = false;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if labels.get(ny as usize, nx as usize) != here {
                        near = true;
                        break 'win;
                    }
                }
            }
            if near {
                hits += 1;
            }
        }
    }
    (hits, total)
}

/// Fraction of mask pixels near a ground-truth boundary. The flag reports an
/// empty mask, for which the fraction is 0 by convention.
pub fn boundary_fraction(mask: &RegionMask, labels: &LabelMap, radius: usize) -> (f64, bool) {
    let (hits, total) = boundary_hits(mask, labels, radius);
    if total == 0 {
        (0.0, true)
    } else {
        (hits as f64 / total as f64, false)
    }
}

/// Per-class pixel counts of the cascade's stage routing.
///
/// `processed[k][c]`: pixels of class c forwarded to (processed by) stage k.
/// `exited[k][c]`: pixels of class c that exited at stage k.
/// `ratios[k][c]`: processed[k+1][c] / processed[k][c], None when the
/// denominator is zero.
#[derive(Debug, Clone)]
pub struct StageStats {
    pub processed: Vec<Vec<u64>>,
    pub exited: Vec<Vec<u64>>,
    pub ratios: Vec<Vec<Option<f64>>>,
}

pub fn stage_stats(
    exit_masks: &[RegionMask],
    labels: &LabelMap,
    class_count: usize,
) -> StageStats {
    let stages = exit_masks.len();
    let (h, w) = labels.dims();
    let mut exited = vec![vec![0u64; class_count]; stages];
    for (k, m) in exit_masks.iter().enumerate() {
        debug_assert_eq!(m.dims(), (h, w));
        for y in 0..h {
            for x in 0..w {
                if m.get(y, x) {
                    let l = labels.get(y, x);
                    if l != IGNORE_LABEL && (l as usize) < class_count {
                        exited[k][l as usize] += 1;
                    }
                }
            }
        }
    }
    // forwarded to stage k = exited at any stage >= k
    let mut processed = vec![vec![0u64; class_count]; stages];
    for k in (0..stages).rev() {
        for c in 0..class_count {
            processed[k][c] =
                exited[k][c] + if k + 1 < stages { processed[k + 1][c] } else { 0 };
        }
    }
    let ratios = (0..stages.saturating_sub(1))
        .map(|k| {
            (0..class_count)
                .map(|c| {
                    if processed[k][c] == 0 {
                        None
                    } else {
                        Some(processed[k + 1][c] as f64 / processed[k][c] as f64)
                    }
                })
                .collect()
        })
        .collect();
    StageStats {
        processed,
        exited,
        ratios,
    }
}

//! The layer-cascade engine: stage execution restricted to forwarded
//! regions, per-pixel confidence routing, and merging of the disjoint stage
//! predictions into one label map.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{LcError, Result};
use crate::exec::ExecMode;
use crate::label::LabelMap;
use crate::layers::{forward_seq, visit_seq, visit_seq_mut, Layer};
use crate::ops::softmax::{argmax_channels, softmax_channels};
use crate::region::{mask_from_confidence, RegionMask};
use crate::tensor::{Elem, Shape4, Tensor};

/// One cascade stage: a channel-preserving body of masked residual blocks
/// plus a two-convolution classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T: Elem> {
    pub body: Vec<Layer<T>>,
    pub head: Vec<Layer<T>>,
    pub dilation: usize,
}

/// A full model: dense stem, cascade stages, and the 1x1 channel
/// transitions that run between consecutive stages on the forwarded region.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel<T: Elem> {
    pub stem: Vec<Layer<T>>,
    pub stages: Vec<Stage<T>>,
    pub transitions: Vec<Vec<Layer<T>>>,
    pub rho: f64,
    pub class_count: usize,
    /// Highest completed training phase, carried through checkpoints.
    pub trained_phase: Option<crate::checkpoint::TrainPhase>,
}

/// What one stage predicted for the pixels it accepted.
#[derive(Debug, Clone)]
pub struct StagePrediction<T: Elem> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub exit_mask: RegionMask,
    /// Argmax labels, valid on `exit_mask`.
    pub labels: LabelMap,
    /// Max class probability per pixel, valid on `exit_mask`.
    pub confidences: Vec<f64>,
}

/// Per-stage compute cost of one inference.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageLedger {
    pub active_count: usize,
    pub flops: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FlopLedger {
    pub stem_flops: u64,
    pub stages: Vec<StageLedger>,
}

impl FlopLedger {
    pub fn total_flops(&self) -> u64 {
        self.stem_flops + self.stages.iter().map(|s| s.flops).sum::<u64>()
    }

    pub fn total_wall_time_s(&self) -> f64 {
        self.stages.iter().map(|s| s.wall_time_s).sum()
    }
}

impl<T: Elem> CascadeModel<T> {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn visit_params<F: FnMut(&str, &Tensor<T>, bool)>(&self, f: &mut F) {
        visit_seq(&self.stem, "stem", f);
        for (k, stage) in self.stages.iter().enumerate() {
            visit_seq(&stage.body, &format!("stage{k}.body"), f);
            visit_seq(&stage.head, &format!("stage{k}.head"), f);
        }
        for (k, t) in self.transitions.iter().enumerate() {
            visit_seq(t, &format!("transition{k}"), f);
        }
    }

    pub fn visit_params_mut<F: FnMut(&str, &mut Tensor<T>, bool)>(&mut self, f: &mut F) {
        visit_seq_mut(&mut self.stem, "stem", f);
        for (k, stage) in self.stages.iter_mut().enumerate() {
            visit_seq_mut(&mut stage.body, &format!("stage{k}.body"), f);
            visit_seq_mut(&mut stage.head, &format!("stage{k}.head"), f);
        }
        for (k, t) in self.transitions.iter_mut().enumerate() {
            visit_seq_mut(t, &format!("transition{k}"), f);
        }
    }

    pub fn state_dict(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, t, _| out.push((name.to_string(), t.clone())));
        out
    }

    /// Load named tensors into matching parameters. Every entry must match an
    /// existing parameter in name and shape; all offenders are listed.
    pub fn load_state_dict(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        use std::collections::HashMap;
        let mut pending: HashMap<&str, &Tensor<T>> =
            entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut mismatched = Vec::new();
        let mut missing = Vec::new();
        self.visit_params_mut(&mut |name, param, _| match pending.remove(name) {
            Some(src) if src.shape() == param.shape() => {
                param.data_mut().copy_from_slice(src.data());
            }
            Some(src) => mismatched.push(format!(
                "{name}: checkpoint {} vs model {}",
                src.shape(),
                param.shape()
            )),
            None => missing.push(name.to_string()),
        });
        let unknown: Vec<String> = pending.keys().map(|s| s.to_string()).collect();
        if !mismatched.is_empty() || !missing.is_empty() || !unknown.is_empty() {
            let mut parts = Vec::new();
            if !mismatched.is_empty() {
                parts.push(format!("shape mismatches: [{}]", mismatched.join(", ")));
            }
            if !missing.is_empty() {
                parts.push(format!("missing from checkpoint: [{}]", missing.join(", ")));
            }
            if !unknown.is_empty() {
                parts.push(format!("unknown in model: [{}]", unknown.join(", ")));
            }
            return Err(LcError::shape(parts.join("; ")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, t, _| n += t.len());
        n
    }

    /// Spatial size of the feature maps after the stem for an input of
    /// (h, w), walking the stem conv specs.
    pub fn stem_out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let mut hw = (h, w);
        for layer in &self.stem {
            if let Layer::Conv(c) = layer {
                hw = c.spec.out_hw(hw.0, hw.1)?;
            }
        }
        Ok(hw)
    }

    fn stem_flops(&self, h: usize, w: usize) -> Result<u64> {
        let mut hw = (h, w);
        let mut flops = 0;
        for layer in &self.stem {
            if let Layer::Conv(c) = layer {
                hw = c.spec.out_hw(hw.0, hw.1)?;
                flops += crate::region::flop_count(&c.spec, hw.0 * hw.1);
            }
        }
        Ok(flops)
    }

    /// Analytic flops of a fully dense forward pass (all masks full) for an
    /// input of (h, w), including transitions and heads.
    pub fn dense_flops(&self, h: usize, w: usize) -> Result<u64> {
        let mut total = self.stem_flops(h, w)?;
        let (fh, fw) = self.stem_out_hw(h, w)?;
        let full = fh * fw;
        for (k, stage) in self.stages.iter().enumerate() {
            if k > 0 {
                total += self.transitions[k - 1]
                    .iter()
                    .map(|l| l.conv_flops(full))
                    .sum::<u64>();
            }
            total += stage_flops(stage, full);
        }
        Ok(total)
    }
}

fn stage_flops<T: Elem>(stage: &Stage<T>, active: usize) -> u64 {
    stage
        .body
        .iter()
        .chain(stage.head.iter())
        .map(|l| l.conv_flops(active))
        .sum()
}

/// Execute one stage on its active region.
///
/// All body and head convolutions run as region convolutions on `active`;
/// features outside the region pass through unchanged (bit-level). The
/// ledger gains one entry with the exact analytic flop sum. An empty region
/// short-circuits: features are returned as-is and the logits are zero.
pub fn run_stage<T: Elem>(
    features: &Tensor<T>,
    active: &RegionMask,
    stage: &Stage<T>,
    ledger: &mut FlopLedger,
    mode: ExecMode,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = features.shape();
    if (s.h, s.w) != active.dims() {
        return Err(LcError::config(format!(
            "stage features {}x{} do not match mask {:?}",
            s.h,
            s.w,
            active.dims()
        )));
    }
    let start = Instant::now();
    let class_count = stage
        .head
        .iter()
        .fold(s.c, |c, layer| layer.out_channels(c));

    if active.is_empty() {
        ledger.stages.push(StageLedger {
            active_count: 0,
            flops: 0,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        return Ok((
            features.clone(),
            Tensor::zeros(Shape4::new(s.n, class_count, s.h, s.w)),
        ));
    }

    let features_out = forward_seq(&stage.body, features, Some(active), mode)?;
    let logits = forward_seq(&stage.head, &features_out, Some(active), mode)?;
    ledger.stages.push(StageLedger {
        active_count: active.active_count(),
        flops: stage_flops(stage, active.active_count()),
        wall_time_s: start.elapsed().as_secs_f64(),
    });
    Ok((features_out, logits))
}

/// Split the active region into exited and forwarded pixels and package the
/// stage's prediction. The final stage ignores rho and labels everything
/// still active, so every pixel receives exactly one label.
pub fn route<T: Elem>(
    logits: &Tensor<T>,
    probs: &Tensor<T>,
    active: &RegionMask,
    rho: f64,
    is_last: bool,
) -> Result<(StagePrediction<T>, RegionMask)> {
    let (h, w) = active.dims();
    let (exit_mask, forward) = if is_last {
        (active.clone(), RegionMask::empty(h, w))
    } else {
        mask_from_confidence(probs, rho, active)?
    };

    let mut labels = LabelMap::filled(h, w, 0);
    let mut confidences = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            if exit_mask.get(y, x) {
                let (c, p) = argmax_channels(probs, 0, y, x);
                labels.set(y, x, c as u8);
                confidences[y * w + x] = p.to_f64();
            }
        }
    }
    Ok((
        StagePrediction {
            logits: logits.clone(),
            probs: probs.clone(),
            exit_mask,
            labels,
            confidences,
        },
        forward,
    ))
}

/// Combine disjoint stage predictions into the final label map. Any overlap
/// or uncovered pixel is a routing bug and raises an invariant error.
pub fn merge<T: Elem>(predictions: &[StagePrediction<T>], hw: (usize, usize)) -> Result<LabelMap> {
    let (h, w) = hw;
    let mut out = LabelMap::filled(h, w, 0);
    let mut coverage = vec![0u8; h * w];
    for pred in predictions {
        if pred.exit_mask.dims() != hw {
            return Err(LcError::invariant(format!(
                "exit mask dims {:?} do not match merge target {:?}",
                pred.exit_mask.dims(),
                hw
            )));
        }
        for y in 0..h {
            for x in 0..w {
                if pred.exit_mask.get(y, x) {
                    coverage[y * w + x] += 1;
                    out.set(y, x, pred.labels.get(y, x));
                }
            }
        }
    }
    if let Some(i) = coverage.iter().position(|&c| c != 1) {
        return Err(LcError::invariant(format!(
            "pixel ({}, {}) covered by {} stage exit masks (expected exactly 1)",
            i / w,
            i % w,
            coverage[i]
        )));
    }
    Ok(out)
}

/// Everything produced by one cascade inference.
#[derive(Debug, Clone)]
pub struct InferOutput<T: Elem> {
    /// Merged labels at prediction resolution.
    pub labels: LabelMap,
    /// Merged labels upsampled (nearest) to the input resolution.
    pub labels_full: LabelMap,
    pub predictions: Vec<StagePrediction<T>>,
    pub ledger: FlopLedger,
}

impl<T: Elem> InferOutput<T> {
    /// Fraction of pixels exiting at each stage; sums to 1.
    pub fn exit_fractions(&self) -> Vec<f64> {
        let total: usize = self.predictions.iter().map(|p| p.exit_mask.len()).max().unwrap_or(0);
        self.predictions
            .iter()
            .map(|p| p.exit_mask.active_count() as f64 / total.max(1) as f64)
            .collect()
    }

    /// Per-pixel confidence of the stage that labeled each pixel.
    pub fn merged_confidence(&self) -> Vec<f64> {
        let (h, w) = self.labels.dims();
        let mut conf = vec![0.0f64; h * w];
        for pred in &self.predictions {
            for y in 0..h {
                for x in 0..w {
                    if pred.exit_mask.get(y, x) {
                        conf[y * w + x] = pred.confidences[y * w + x];
                    }
                }
            }
        }
        conf
    }
}

/// End-to-end cascade inference: dense stem, then region-restricted stages
/// with confidence routing, then label merging.
pub fn infer<T: Elem>(
    image: &Tensor<T>,
    model: &CascadeModel<T>,
    rho_override: Option<f64>,
    mode: ExecMode,
) -> Result<InferOutput<T>> {
    let rho = rho_override.unwrap_or(model.rho);
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(LcError::config(format!("rho must be in (0, 1], got {rho}")));
    }
    let s = image.shape();
    if s.n != 1 {
        return Err(LcError::config("infer expects a single image (batch 1)"));
    }

    let mut ledger = FlopLedger {
        stem_flops: model.stem_flops(s.h, s.w)?,
        stages: Vec::new(),
    };
    let mut features = forward_seq(&model.stem, image, None, mode)?;
    let fs = features.shape();
    let mut active = RegionMask::full(fs.h, fs.w);

    let mut predictions = Vec::with_capacity(model.stage_count());
    for (k, stage) in model.stages.iter().enumerate() {
        let stage_start = Instant::now();
        let mut trans_flops = 0u64;
        if k > 0 && !active.is_empty() {
            features = forward_seq(&model.transitions[k - 1], &features, Some(&active), mode)?;
            trans_flops = model.transitions[k - 1]
                .iter()
                .map(|l| l.conv_flops(active.active_count()))
                .sum();
        }
        let (next_features, logits) = run_stage(&features, &active, stage, &mut ledger, mode)?;
        features = next_features;
        let probs = softmax_channels(&logits)?;
        let is_last = k + 1 == model.stage_count();
        let (pred, forward) = route(&logits, &probs, &active, rho, is_last)?;
        predictions.push(pred);
        active = forward;

        let entry = ledger.stages.last_mut().expect("run_stage pushed an entry");
        entry.flops += trans_flops;
        entry.wall_time_s = stage_start.elapsed().as_secs_f64();
    }

    let labels = merge(&predictions, (fs.h, fs.w))?;
    let labels_full = labels.resample_nearest(s.h, s.w);
    Ok(InferOutput {
        labels,
        labels_full,
        predictions,
        ledger,
    })
}

/// Fully dense forward pass (no masks anywhere); returns the final stage's
/// logits. This is the reference the rho = 1.0 cascade must reproduce.
pub fn dense_forward<T: Elem>(
    image: &Tensor<T>,
    model: &CascadeModel<T>,
    mode: ExecMode,
) -> Result<Tensor<T>> {
    let mut features = forward_seq(&model.stem, image, None, mode)?;
    let mut logits = None;
    for (k, stage) in model.stages.iter().enumerate() {
        if k > 0 {
            features = forward_seq(&model.transitions[k - 1], &features, None, mode)?;
        }
        features = forward_seq(&stage.body, &features, None, mode)?;
        logits = Some(forward_seq(&stage.head, &features, None, mode)?);
    }
    logits.ok_or_else(|| LcError::config("model has no stages"))
}

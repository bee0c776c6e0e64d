//! Two-phase difficulty-aware training.
//!
//! Initial training supervises every stage head with the full ground-truth
//! map (all stage losses jointly minimized, as in deeply supervised nets).
//! Cascade training then routes each batch at threshold rho and restricts
//! stage k's loss and compute to the pixels actually forwarded to it, so
//! gradients outside a stage's region are exactly zero. A model-cascade
//! baseline (stages trained separately, predecessors frozen) and a
//! random-label-dropout baseline share the same machinery.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{infer, CascadeModel};
use crate::checkpoint::{save_model, TrainPhase};
use crate::error::{LcError, Result};
use crate::exec::ExecMode;
use crate::label::{LabelMap, IGNORE_LABEL};
use crate::layers::{backward_seq, forward_train_seq, Grads, LayerCache};
use crate::metrics::{miou, ConfusionMatrix};
use crate::ops::loss::masked_cross_entropy;
use crate::ops::optim::OptimizerState;
use crate::ops::softmax::{argmax_channels, softmax_channels};
use crate::region::{mask_from_confidence, RegionMask};
use crate::tensor::{Elem, Shape4, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_drop_factor: f64,
    pub drop_every_initial: usize,
    pub drop_every_cascade: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_initial: usize,
    pub epochs_cascade: usize,
    pub rho: f64,
    pub seed: u64,
    /// Empty means all stages weigh 1.0.
    pub stage_loss_weights: Vec<f64>,
    pub augment_hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            lr_initial: 1e-4,
            lr_drop_factor: 10.0,
            drop_every_initial: 10,
            drop_every_cascade: 15,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs_initial: 20,
            epochs_cascade: 30,
            rho: 0.985,
            seed: 0,
            stage_loss_weights: Vec::new(),
            augment_hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, stage_count: usize) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LcError::config("batch_size must be positive"));
        }
        if self.lr_initial <= 0.0 || self.lr_drop_factor <= 0.0 {
            return Err(LcError::config("learning rates must be positive"));
        }
        if self.drop_every_initial == 0 || self.drop_every_cascade == 0 {
            return Err(LcError::config("drop cadence must be positive"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(LcError::config(format!(
                "rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        if !self.stage_loss_weights.is_empty() && self.stage_loss_weights.len() != stage_count {
            return Err(LcError::config(format!(
                "stage_loss_weights has {} entries for {} stages",
                self.stage_loss_weights.len(),
                stage_count
            )));
        }
        Ok(())
    }

    fn weights(&self, stage_count: usize) -> Vec<f64> {
        if self.stage_loss_weights.is_empty() {
            vec![1.0; stage_count]
        } else {
            self.stage_loss_weights.clone()
        }
    }
}

/// Step-decay schedule: lr_initial * drop_factor^(-floor(epoch / cadence)),
/// with the cadence chosen by phase.
pub fn lr_schedule(epoch: usize, phase: TrainPhase, cfg: &TrainConfig) -> f64 {
    let drop_every = match phase {
        TrainPhase::Initial => cfg.drop_every_initial,
        TrainPhase::Cascade => cfg.drop_every_cascade,
    };
    lr_at(epoch, drop_every, cfg)
}

fn lr_at(epoch: usize, drop_every: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr_initial * cfg.lr_drop_factor.powi(-((epoch / drop_every) as i32))
}

/// One training pair at prediction resolution.
#[derive(Debug, Clone)]
pub struct TrainItem<T: Elem> {
    pub image: Tensor<T>,
    pub labels: LabelMap,
}

/// Downsample ground truth to the model's prediction resolution and cast
/// images to the training element type.
pub fn prepare_items<T: Elem>(
    samples: &[crate::synth::SynthSample],
    model: &CascadeModel<T>,
) -> Result<Vec<TrainItem<T>>> {
    samples
        .iter()
        .map(|s| {
            let shape = s.image.shape();
            let (fh, fw) = model.stem_out_hw(shape.h, shape.w)?;
            Ok(TrainItem {
                image: s.image.cast::<T>(),
                labels: s.labels.resample_nearest(fh, fw),
            })
        })
        .collect()
}

/// Same preparation for (image, labels) pairs loaded from disk.
pub fn prepare_pairs<T: Elem>(
    pairs: &[(Tensor<T>, LabelMap)],
    model: &CascadeModel<T>,
) -> Result<Vec<TrainItem<T>>> {
    pairs
        .iter()
        .map(|(image, labels)| {
            let shape = image.shape();
            let (fh, fw) = model.stem_out_hw(shape.h, shape.w)?;
            Ok(TrainItem {
                image: image.clone(),
                labels: labels.resample_nearest(fh, fw),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: String,
    pub lr: f64,
    pub stage_losses: Vec<f64>,
    pub exit_fractions: Vec<f64>,
    pub miou_train: f64,
    pub miou_val: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub stage_count: usize,
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn new(stage_count: usize) -> TrainReport {
        TrainReport {
            stage_count,
            rows: Vec::new(),
        }
    }

    pub fn merge(&mut self, other: TrainReport) {
        self.rows.extend(other.rows);
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,phase,lr");
        for k in 1..=self.stage_count {
            out.push_str(&format!(",loss_s{k}"));
        }
        for k in 1..=self.stage_count {
            out.push_str(&format!(",exit_s{k}"));
        }
        out.push_str(",miou_train,miou_val\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.8e}", r.epoch, r.phase, r.lr));
            for v in &r.stage_losses {
                out.push_str(&format!(",{v:.6}"));
            }
            for v in &r.exit_fractions {
                out.push_str(&format!(",{v:.6}"));
            }
            out.push_str(&format!(",{:.6},{:.6}\n", r.miou_train, r.miou_val));
        }
        out
    }
}

/// Which pixels supervise and which pixels are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Supervision {
    /// Every stage sees the full image (initial training / DSN).
    Full,
    /// Stage k is computed and supervised on the region routed to it.
    Routed,
    /// Dense compute, but stage losses drop random pixels at the rates the
    /// cascade would have dropped them.
    RandomDropout,
}

struct StageFwd<T: Elem> {
    /// Pixels routed into this stage (loss region under `Routed`).
    active: RegionMask,
    /// Mask the layers were computed with (= `active` when routed, full
    /// otherwise).
    compute: RegionMask,
    trans_caches: Vec<LayerCache<T>>,
    body_caches: Vec<LayerCache<T>>,
    head_caches: Vec<LayerCache<T>>,
    probs: Tensor<T>,
    exit: RegionMask,
    skipped: bool,
}

struct FullForward<T: Elem> {
    stem_caches: Vec<LayerCache<T>>,
    stages: Vec<StageFwd<T>>,
    feat_hw: (usize, usize),
}

fn forward_pass<T: Elem>(
    model: &CascadeModel<T>,
    image: &Tensor<T>,
    rho: f64,
    masked_compute: bool,
    top_stage: usize,
    mode: ExecMode,
) -> Result<FullForward<T>> {
    let (mut features, stem_caches) = forward_train_seq(&model.stem, image, None, mode)?;
    let fs = features.shape();
    let full = RegionMask::full(fs.h, fs.w);
    let mut routed = full.clone();
    let mut stages = Vec::with_capacity(top_stage + 1);

    for (k, stage) in model.stages.iter().enumerate().take(top_stage + 1) {
        let compute = if masked_compute { routed.clone() } else { full.clone() };
        if masked_compute && compute.is_empty() {
            stages.push(StageFwd {
                active: routed.clone(),
                compute,
                trans_caches: Vec::new(),
                body_caches: Vec::new(),
                head_caches: Vec::new(),
                probs: Tensor::filled(
                    Shape4::new(1, model.class_count, fs.h, fs.w),
                    T::from_f64(1.0 / model.class_count as f64),
                ),
                exit: RegionMask::empty(fs.h, fs.w),
                skipped: true,
            });
            continue;
        }

        let mut trans_caches = Vec::new();
        if k > 0 {
            let (f, tc) =
                forward_train_seq(&model.transitions[k - 1], &features, Some(&compute), mode)?;
            features = f;
            trans_caches = tc;
        }
        let (body_out, body_caches) = forward_train_seq(&stage.body, &features, Some(&compute), mode)?;
        let (logits, head_caches) =
            forward_train_seq(&stage.head, &body_out, Some(&compute), mode)?;
        features = body_out;
        let probs = softmax_channels(&logits)?;

        let is_last = k + 1 == model.stage_count();
        let (exit, forward) = if is_last || k == top_stage {
            (routed.clone(), RegionMask::empty(fs.h, fs.w))
        } else {
            mask_from_confidence(&probs, rho, &routed)?
        };
        stages.push(StageFwd {
            active: routed.clone(),
            compute,
            trans_caches,
            body_caches,
            head_caches,
            probs,
            exit,
            skipped: false,
        });
        routed = forward;
    }

    Ok(FullForward {
        stem_caches,
        stages,
        feat_hw: (fs.h, fs.w),
    })
}

/// Merged prediction implied by the routing of one training forward pass.
fn merged_train_labels<T: Elem>(fwd: &FullForward<T>) -> LabelMap {
    let (h, w) = fwd.feat_hw;
    let mut out = LabelMap::filled(h, w, 0);
    for sf in &fwd.stages {
        for y in 0..h {
            for x in 0..w {
                if sf.exit.get(y, x) {
                    let (c, _) = argmax_channels(&sf.probs, 0, y, x);
                    out.set(y, x, c as u8);
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn backward_pass<T: Elem>(
    model: &CascadeModel<T>,
    fwd: &FullForward<T>,
    labels: &LabelMap,
    weights: &[f64],
    supervision: Supervision,
    dropout_masks: Option<&[RegionMask]>,
    stop_below: Option<usize>,
    mode: ExecMode,
    grads: &mut Grads<T>,
) -> Result<Vec<f64>> {
    let (h, w) = fwd.feat_hw;
    let full = RegionMask::full(h, w);
    let mut losses = vec![0.0f64; fwd.stages.len()];
    let mut g_feat: Option<Tensor<T>> = None;

    for k in (0..fwd.stages.len()).rev() {
        let sf = &fwd.stages[k];
        if sf.skipped {
            continue;
        }
        let contrib = match supervision {
            Supervision::Full => &full,
            Supervision::Routed => &sf.active,
            Supervision::RandomDropout => dropout_masks
                .map(|m| &m[k])
                .expect("dropout supervision needs masks"),
        };
        let (loss_k, mut grad_logits) =
            masked_cross_entropy(&sf.probs, labels, contrib, IGNORE_LABEL)?;
        losses[k] = loss_k;

        let w_k = weights[k];
        let mut g_acc = g_feat.take();
        let grad_is_zero = grad_logits.data().iter().all(|v| *v == T::ZERO);
        if w_k != 0.0 && !grad_is_zero {
            if w_k != 1.0 {
                let s = T::from_f64(w_k);
                for v in grad_logits.data_mut() {
                    *v = *v * s;
                }
            }
            let g_head = backward_seq(
                &model.stages[k].head,
                &format!("stage{k}.head"),
                &grad_logits,
                &sf.head_caches,
                Some(&sf.compute),
                mode,
                grads,
            )?;
            g_acc = Some(match g_acc {
                Some(u) => crate::ops::elementwise::elementwise_add(&u, &g_head)?,
                None => g_head,
            });
        }

        let Some(g) = g_acc else {
            g_feat = None;
            continue;
        };
        let g_body = backward_seq(
            &model.stages[k].body,
            &format!("stage{k}.body"),
            &g,
            &sf.body_caches,
            Some(&sf.compute),
            mode,
            grads,
        )?;
        if stop_below == Some(k) {
            if k > 0 {
                backward_seq(
                    &model.transitions[k - 1],
                    &format!("transition{}", k - 1),
                    &g_body,
                    &sf.trans_caches,
                    Some(&sf.compute),
                    mode,
                    grads,
                )?;
            }
            return Ok(losses);
        }
        g_feat = if k > 0 {
            Some(backward_seq(
                &model.transitions[k - 1],
                &format!("transition{}", k - 1),
                &g_body,
                &sf.trans_caches,
                Some(&sf.compute),
                mode,
                grads,
            )?)
        } else {
            Some(g_body)
        };
    }

    if let Some(g) = g_feat {
        backward_seq(&model.stem, "stem", &g, &fwd.stem_caches, None, mode, grads)?;
    }
    Ok(losses)
}

struct ImageOut<T: Elem> {
    grads: Grads<T>,
    losses: Vec<f64>,
    exits: Vec<f64>,
    confusion: ConfusionMatrix,
}

#[allow(clippy::too_many_arguments)]
fn image_step<T: Elem>(
    model: &CascadeModel<T>,
    item: &TrainItem<T>,
    flip: bool,
    dropout_seed: u64,
    spec: &PhaseSpec,
    class_count: usize,
    mode: ExecMode,
) -> Result<ImageOut<T>> {
    let (image, labels) = if flip {
        (item.image.hflip(), item.labels.hflip())
    } else {
        (item.image.clone(), item.labels.clone())
    };
    let masked_compute = spec.supervision == Supervision::Routed;
    let fwd = forward_pass(model, &image, spec.rho, masked_compute, spec.top_stage, mode)?;

    // random label dropout mirrors the routed pixel counts with random
    // positions
    let dropout_masks = if spec.supervision == Supervision::RandomDropout {
        let (h, w) = fwd.feat_hw;
        let mut rng = ChaCha20Rng::seed_from_u64(dropout_seed);
        Some(
            fwd.stages
                .iter()
                .enumerate()
                .map(|(k, sf)| {
                    if k == 0 {
                        RegionMask::full(h, w)
                    } else {
                        random_mask_with_count(h, w, sf.active.active_count(), &mut rng)
                    }
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };

    let mut grads = Grads::new();
    let losses = backward_pass(
        model,
        &fwd,
        &labels,
        &spec.weights,
        spec.supervision,
        dropout_masks.as_deref(),
        spec.stop_below,
        mode,
        &mut grads,
    )?;

    let total = (fwd.feat_hw.0 * fwd.feat_hw.1) as f64;
    let exits = fwd
        .stages
        .iter()
        .map(|s| s.exit.active_count() as f64 / total)
        .collect();
    let mut confusion = ConfusionMatrix::new(class_count);
    confusion.add_maps(&labels, &merged_train_labels(&fwd));
    Ok(ImageOut {
        grads,
        losses,
        exits,
        confusion,
    })
}

fn random_mask_with_count(h: usize, w: usize, count: usize, rng: &mut ChaCha20Rng) -> RegionMask {
    let total = h * w;
    let count = count.min(total);
    let mut idx: Vec<usize> = (0..total).collect();
    // partial Fisher-Yates: the first `count` entries become the sample
    for i in 0..count {
        let j = rng.random_range(i..total);
        idx.swap(i, j);
    }
    let mut m = RegionMask::empty(h, w);
    for &i in &idx[..count] {
        m.set(i / w, i % w, true);
    }
    m
}

/// One phase of training (initial, cascade, one MC stage, ...).
struct PhaseSpec {
    name: String,
    epochs: usize,
    drop_every: usize,
    supervision: Supervision,
    rho: f64,
    weights: Vec<f64>,
    top_stage: usize,
    stop_below: Option<usize>,
    trainable: Option<Vec<String>>,
    mark_phase: Option<TrainPhase>,
}

/// Where to drop periodic checkpoints during training.
#[derive(Debug, Clone)]
pub struct CheckpointCadence {
    pub dir: PathBuf,
    pub every: usize,
}

fn run_phase<T: Elem>(
    model: &mut CascadeModel<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    spec: &PhaseSpec,
    mode: ExecMode,
    rng: &mut ChaCha20Rng,
    ckpt: Option<&CheckpointCadence>,
    report: &mut TrainReport,
) -> Result<()> {
    let stage_count = model.stage_count();
    let mut opt = OptimizerState::<T>::new(cfg.lr_initial, cfg.momentum, cfg.weight_decay);

    for epoch in 0..spec.epochs {
        let lr = lr_at(epoch, spec.drop_every, cfg);
        opt.learning_rate = lr;

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);

        let mut epoch_losses = vec![0.0f64; stage_count];
        let mut epoch_exits = vec![0.0f64; stage_count];
        let mut confusion = ConfusionMatrix::new(model.class_count);
        let mut images_seen = 0usize;

        for batch in order.chunks(cfg.batch_size) {
            let plan: Vec<(usize, bool, u64)> = batch
                .iter()
                .map(|&i| {
                    let flip = cfg.augment_hflip && rng.random::<bool>();
                    let drop_seed = rng.random::<u64>();
                    (i, flip, drop_seed)
                })
                .collect();

            let step = |&(i, flip, seed): &(usize, bool, u64)| {
                image_step(model, &train[i], flip, seed, spec, model.class_count, mode)
            };
            let outs: Vec<ImageOut<T>> = if mode == ExecMode::Fast {
                plan.par_iter().map(step).collect::<Result<_>>()?
            } else {
                plan.iter().map(step).collect::<Result<_>>()?
            };

            let mut grads = Grads::new();
            for out in outs {
                grads.merge(out.grads);
                for (a, b) in epoch_losses.iter_mut().zip(out.losses.iter()) {
                    *a += b;
                }
                for (a, b) in epoch_exits.iter_mut().zip(out.exits.iter()) {
                    *a += b;
                }
                confusion.merge(&out.confusion);
                images_seen += 1;
            }
            grads.scale(1.0 / batch.len() as f64);

            let trainable = spec.trainable.as_deref();
            model.visit_params_mut(&mut |name, param, frozen| {
                if frozen {
                    return;
                }
                if let Some(prefixes) = trainable {
                    if !prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                        return;
                    }
                }
                if let Some(g) = grads.get(name) {
                    opt.step_param(name, param, g, false);
                }
            });
        }

        let n = images_seen.max(1) as f64;
        for v in epoch_losses.iter_mut() {
            *v /= n;
        }
        for v in epoch_exits.iter_mut() {
            *v /= n;
        }
        let miou_train = miou(&confusion).map(|(_, m)| m).unwrap_or(0.0);
        let miou_val = if val.is_empty() {
            0.0
        } else {
            eval_confusion(model, val, Some(spec.rho), mode)?
                .1
        };

        report.rows.push(EpochRow {
            epoch,
            phase: spec.name.clone(),
            lr,
            stage_losses: epoch_losses,
            exit_fractions: epoch_exits,
            miou_train,
            miou_val,
        });

        if let Some(c) = ckpt {
            if c.every > 0 && (epoch + 1) % c.every == 0 {
                let phase = spec.mark_phase.unwrap_or(TrainPhase::Initial);
                let path = c
                    .dir
                    .join(format!("ckpt-{}-{:04}.lckp", spec.name, epoch + 1));
                save_model(&path, model, phase, epoch as u32 + 1, Some(&opt))?;
            }
        }
    }

    if let Some(phase) = spec.mark_phase {
        model.trained_phase = Some(phase);
    }
    Ok(())
}

/// Confusion and mIoU of cascade inference over a set of items.
pub fn eval_confusion<T: Elem>(
    model: &CascadeModel<T>,
    items: &[TrainItem<T>],
    rho: Option<f64>,
    mode: ExecMode,
) -> Result<(ConfusionMatrix, f64)> {
    let per_item = |item: &TrainItem<T>| -> Result<ConfusionMatrix> {
        let out = infer(&item.image, model, rho, mode)?;
        let mut c = ConfusionMatrix::new(model.class_count);
        c.add_maps(&item.labels, &out.labels);
        Ok(c)
    };
    let parts: Vec<ConfusionMatrix> = if mode == ExecMode::Fast {
        items.par_iter().map(per_item).collect::<Result<_>>()?
    } else {
        items.iter().map(per_item).collect::<Result<_>>()?
    };
    let mut confusion = ConfusionMatrix::new(model.class_count);
    for p in &parts {
        confusion.merge(p);
    }
    let (_, mean) = miou(&confusion)?;
    Ok((confusion, mean))
}

fn all_stages(n: usize) -> usize {
    n.saturating_sub(1)
}

/// Phase 1: full-image supervision at every stage head.
pub fn initial_train<T: Elem>(
    model: &mut CascadeModel<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    mode: ExecMode,
    ckpt: Option<&CheckpointCadence>,
) -> Result<TrainReport> {
    cfg.validate(model.stage_count())?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::new(model.stage_count());
    let spec = PhaseSpec {
        name: "initial".into(),
        epochs: cfg.epochs_initial,
        drop_every: cfg.drop_every_initial,
        supervision: Supervision::Full,
        rho: cfg.rho,
        weights: cfg.weights(model.stage_count()),
        top_stage: all_stages(model.stage_count()),
        stop_below: None,
        trainable: None,
        mark_phase: Some(TrainPhase::Initial),
    };
    run_phase(model, train, val, cfg, &spec, mode, &mut rng, ckpt, &mut report)?;
    Ok(report)
}

/// Phase 2: per-stage losses restricted to each stage's forwarded region.
/// Requires a completed initial phase unless `force` is set.
pub fn cascade_train<T: Elem>(
    model: &mut CascadeModel<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    mode: ExecMode,
    ckpt: Option<&CheckpointCadence>,
    force: bool,
) -> Result<TrainReport> {
    cfg.validate(model.stage_count())?;
    if model.trained_phase.is_none() && !force {
        return Err(LcError::State(
            "cascade training requires a model that completed initial training \
             (use force to override)"
                .into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report = TrainReport::new(model.stage_count());
    let spec = PhaseSpec {
        name: "cascade".into(),
        epochs: cfg.epochs_cascade,
        drop_every: cfg.drop_every_cascade,
        supervision: Supervision::Routed,
        rho: cfg.rho,
        weights: cfg.weights(model.stage_count()),
        top_stage: all_stages(model.stage_count()),
        stop_below: None,
        trainable: None,
        mark_phase: Some(TrainPhase::Cascade),
    };
    run_phase(model, train, val, cfg, &spec, mode, &mut rng, ckpt, &mut report)?;
    Ok(report)
}

/// Initial then cascade training (the layer-cascade recipe).
pub fn train_lc<T: Elem>(
    model: &mut CascadeModel<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    mode: ExecMode,
    ckpt: Option<&CheckpointCadence>,
) -> Result<TrainReport> {
    let mut report = initial_train(model, train, val, cfg, mode, ckpt)?;
    report.merge(cascade_train(model, train, val, cfg, mode, ckpt, false)?);
    Ok(report)
}

/// DSN baseline: the rho = 1.0 degenerate cascade (identical full
/// supervision in both phases).
pub fn train_dsn<T: Elem>(
    model: &mut CascadeModel<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    mode: ExecMode,
    ckpt: Option<&CheckpointCadence>,
) -> Result<TrainReport> {
    let cfg = TrainConfig {
        rho: 1.0,
        ..cfg.clone()
    };
    train_lc(model, train, val, &cfg, mode, ckpt)
}

/// DSN + random label dropout: dense compute, but the cascade-phase losses
/// drop random pixels at the rates routing would have dropped them.
pub fn train_dsn_dropout<T: Elem>(
    model: &mut CascadeModel<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    mode: ExecMode,
    ckpt: Option<&CheckpointCadence>,
) -> Result<TrainReport> {
    let mut report = initial_train(model, train, val, cfg, mode, ckpt)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let spec = PhaseSpec {
        name: "dropout".into(),
        epochs: cfg.epochs_cascade,
        drop_every: cfg.drop_every_cascade,
        supervision: Supervision::RandomDropout,
        rho: cfg.rho,
        weights: cfg.weights(model.stage_count()),
        top_stage: all_stages(model.stage_count()),
        stop_below: None,
        trainable: None,
        mark_phase: Some(TrainPhase::Cascade),
    };
    run_phase(model, train, val, cfg, &spec, mode, &mut rng, None, &mut report)?;
    Ok(report)
}

/// Model-cascade baseline: stages trained separately in order, with all
/// previous stages (and the stem) frozen, same routing threshold. The
/// total epoch budget matches initial + cascade, split equally per stage.
pub fn mc_baseline_train<T: Elem>(
    model: &mut CascadeModel<T>,
    train: &[TrainItem<T>],
    val: &[TrainItem<T>],
    cfg: &TrainConfig,
    mode: ExecMode,
    ckpt: Option<&CheckpointCadence>,
) -> Result<TrainReport> {
    cfg.validate(model.stage_count())?;
    let stage_count = model.stage_count();
    let budget = (cfg.epochs_initial + cfg.epochs_cascade).max(stage_count);
    let per_stage = (budget / stage_count).max(1);

    let mut report = TrainReport::new(stage_count);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    for k in 0..stage_count {
        let mut weights = vec![0.0; stage_count];
        weights[k] = 1.0;
        let mut trainable = vec![format!("stage{k}.")];
        if k == 0 {
            // the stem has no stage of its own; it trains with stage 1
            trainable.push("stem.".into());
        } else {
            trainable.push(format!("transition{}.", k - 1));
        }
        let spec = PhaseSpec {
            name: format!("mc-stage{}", k + 1),
            epochs: per_stage,
            drop_every: cfg.drop_every_initial,
            supervision: Supervision::Routed,
            rho: cfg.rho,
            weights,
            top_stage: k,
            stop_below: if k == 0 { None } else { Some(k) },
            trainable: Some(trainable),
            mark_phase: if k + 1 == stage_count {
                Some(TrainPhase::Cascade)
            } else {
                None
            },
        };
        run_phase(model, train, val, cfg, &spec, mode, &mut rng, ckpt, &mut report)?;
    }
    Ok(report)
}

/// Per-stage loss gradients (w.r.t. logits) of one routed training step,
/// for verifying that supervision stays inside each stage's region.
pub struct GradientProbe<T: Elem> {
    pub stage_grad_logits: Vec<Tensor<T>>,
    pub stage_contrib: Vec<RegionMask>,
    pub stage_losses: Vec<f64>,
}

pub fn cascade_gradient_probe<T: Elem>(
    model: &CascadeModel<T>,
    item: &TrainItem<T>,
    rho: f64,
    mode: ExecMode,
) -> Result<GradientProbe<T>> {
    let fwd = forward_pass(
        model,
        &item.image,
        rho,
        true,
        model.stage_count() - 1,
        mode,
    )?;
    let mut stage_grad_logits = Vec::new();
    let mut stage_contrib = Vec::new();
    let mut stage_losses = Vec::new();
    for sf in &fwd.stages {
        let (loss, grad) = masked_cross_entropy(&sf.probs, &item.labels, &sf.active, IGNORE_LABEL)?;
        stage_grad_logits.push(grad);
        stage_contrib.push(sf.active.clone());
        stage_losses.push(loss);
    }
    Ok(GradientProbe {
        stage_grad_logits,
        stage_contrib,
        stage_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_model, BackboneConfig};

    fn tiny_config(seed: u64) -> BackboneConfig {
        BackboneConfig {
            class_count: 4,
            stem_channels: vec![4, 6],
            stage_blocks: vec![1, 1, 1],
            stage_channels: vec![6, 8, 10],
            stage_dilations: vec![1, 2, 2],
            rho: 0.985,
            seed,
            ..Default::default()
        }
    }

    fn tiny_data<T: Elem>(model: &CascadeModel<T>, n: usize, seed: u64) -> Vec<TrainItem<T>> {
        let samples = crate::synth::gen_dataset(n, 24, 4, seed, 0.1);
        prepare_items(&samples, model).unwrap()
    }

    fn fast_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            lr_initial: 0.05,
            epochs_initial: 2,
            epochs_cascade: 2,
            drop_every_initial: 10,
            drop_every_cascade: 15,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(0, TrainPhase::Initial, &cfg), 1e-4);
        assert!((lr_schedule(10, TrainPhase::Initial, &cfg) - 1e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(14, TrainPhase::Cascade, &cfg), 1e-4);
        assert!((lr_schedule(15, TrainPhase::Cascade, &cfg) - 1e-5).abs() < 1e-18);
        // non-increasing within a phase, exact closed form
        let mut prev = f64::INFINITY;
        for e in 0..40 {
            let lr = lr_schedule(e, TrainPhase::Initial, &cfg);
            assert!(lr <= prev);
            assert_eq!(lr, 1e-4 * 10f64.powi(-((e / 10) as i32)));
            prev = lr;
        }
    }

    #[test]
    fn zero_stage_weights_leave_params_unchanged() {
        let mut model = build_model::<f32>(&tiny_config(1)).unwrap();
        let data = tiny_data(&model, 4, 5);
        let cfg = TrainConfig {
            stage_loss_weights: vec![0.0, 0.0, 0.0],
            epochs_initial: 1,
            batch_size: 2,
            ..fast_cfg()
        };
        let before = model.state_dict();
        initial_train(&mut model, &data, &[], &cfg, ExecMode::Deterministic, None).unwrap();
        let after = model.state_dict();
        for ((n, a), (_, b)) in before.iter().zip(after.iter()) {
            assert_eq!(a.data(), b.data(), "{n} changed under zero loss weights");
        }
    }

    #[test]
    fn initial_loss_starts_near_ln_k() {
        let mut model = build_model::<f32>(&tiny_config(2)).unwrap();
        let data = tiny_data(&model, 8, 6);
        let cfg = TrainConfig {
            epochs_initial: 1,
            lr_initial: 1e-6,
            batch_size: 8,
            augment_hflip: false,
            ..fast_cfg()
        };
        let report =
            initial_train(&mut model, &data, &[], &cfg, ExecMode::Deterministic, None).unwrap();
        let ln_k = 4f64.ln();
        for &l in &report.rows[0].stage_losses {
            assert!((l - ln_k).abs() < 0.15, "loss {l} too far from ln(4)={ln_k}");
        }
    }

    #[test]
    fn cascade_requires_initial_phase_unless_forced() {
        let mut model = build_model::<f32>(&tiny_config(3)).unwrap();
        let data = tiny_data(&model, 2, 7);
        let cfg = TrainConfig {
            epochs_cascade: 1,
            batch_size: 2,
            ..fast_cfg()
        };
        let err = cascade_train(&mut model, &data, &[], &cfg, ExecMode::Deterministic, None, false);
        assert!(matches!(err, Err(LcError::State(_))));
        assert!(cascade_train(&mut model, &data, &[], &cfg, ExecMode::Deterministic, None, true)
            .is_ok());
    }

    #[test]
    fn rho_one_cascade_matches_initial_trajectory() {
        // with rho = 1.0 all masks are full, so cascade training must follow
        // the exact parameter trajectory of initial training given one seed
        let cfg_a = TrainConfig {
            rho: 1.0,
            epochs_initial: 2,
            batch_size: 4,
            lr_initial: 0.05,
            seed: 11,
            drop_every_initial: 10,
            drop_every_cascade: 10,
            ..Default::default()
        };
        let mut a = build_model::<f32>(&tiny_config(4)).unwrap();
        let data = tiny_data(&a, 8, 8);
        initial_train(&mut a, &data, &[], &cfg_a, ExecMode::Deterministic, None).unwrap();

        let mut b = build_model::<f32>(&tiny_config(4)).unwrap();
        b.trained_phase = Some(TrainPhase::Initial);
        let cfg_b = TrainConfig {
            epochs_cascade: 2,
            // cascade phase derives its rng from seed+1; compensate so both
            // runs draw identical shuffles
            seed: 10,
            ..cfg_a.clone()
        };
        cascade_train(&mut b, &data, &[], &cfg_b, ExecMode::Deterministic, None, false).unwrap();

        for ((n, ta), (_, tb)) in a.state_dict().iter().zip(b.state_dict().iter()) {
            let bits_a: Vec<u32> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "trajectory diverged at {n}");
        }
    }

    #[test]
    fn gradient_probe_is_bit_zero_outside_contrib() {
        let mut model = build_model::<f32>(&tiny_config(5)).unwrap();
        let data = tiny_data(&model, 6, 9);
        let cfg = TrainConfig {
            epochs_initial: 2,
            batch_size: 3,
            lr_initial: 0.05,
            ..fast_cfg()
        };
        initial_train(&mut model, &data, &[], &cfg, ExecMode::Deterministic, None).unwrap();
        // rho just above uniform confidence so some pixels exit early
        let probe = cascade_gradient_probe(&model, &data[0], 0.3, ExecMode::Deterministic).unwrap();
        let mut saw_restricted = false;
        for (grad, contrib) in probe
            .stage_grad_logits
            .iter()
            .zip(probe.stage_contrib.iter())
        {
            let s = grad.shape();
            if !contrib.is_full() {
                saw_restricted = true;
            }
            for y in 0..s.h {
                for x in 0..s.w {
                    if !contrib.get(y, x) {
                        for c in 0..s.c {
                            assert_eq!(grad.at(0, c, y, x).to_bits(), 0.0f32.to_bits());
                        }
                    }
                }
            }
        }
        assert!(saw_restricted, "probe never saw a restricted stage");
    }

    #[test]
    fn mc_freezes_previous_stages() {
        let mut model = build_model::<f32>(&tiny_config(6)).unwrap();
        let data = tiny_data(&model, 6, 10);
        let cfg = TrainConfig {
            epochs_initial: 2,
            epochs_cascade: 1,
            batch_size: 3,
            lr_initial: 0.05,
            seed: 2,
            ..Default::default()
        };
        // capture stage-1 params after MC stage-1 phase by re-running with a
        // one-stage budget; instead, just train fully and check stem+stage0
        // equal the state after phase 1. Simpler: record params before the
        // later phases by training stage by stage manually.
        let budget = cfg.epochs_initial + cfg.epochs_cascade;
        let per_stage = (budget / 3).max(1);
        assert_eq!(per_stage, 1);
        mc_baseline_train(&mut model, &data, &[], &cfg, ExecMode::Deterministic, None).unwrap();
        // train a second model with the same seed but only stage-1's phase
        let mut first_only = build_model::<f32>(&tiny_config(6)).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let spec = PhaseSpec {
            name: "mc-stage1".into(),
            epochs: per_stage,
            drop_every: cfg.drop_every_initial,
            supervision: Supervision::Routed,
            rho: cfg.rho,
            weights: vec![1.0, 0.0, 0.0],
            top_stage: 0,
            stop_below: None,
            trainable: Some(vec!["stage0.".into(), "stem.".into()]),
            mark_phase: None,
        };
        let mut report = TrainReport::new(3);
        run_phase(
            &mut first_only,
            &data,
            &[],
            &cfg,
            &spec,
            ExecMode::Deterministic,
            &mut rng,
            None,
            &mut report,
        )
        .unwrap();
        // stage-1 (and stem) params of the full MC run bit-equal the
        // stage-1-only run: later phases froze them
        let full = model.state_dict();
        let only = first_only.state_dict();
        for ((n, a), (_, b)) in full.iter().zip(only.iter()) {
            if n.starts_with("stem.") || n.starts_with("stage0.") {
                let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(bits_a, bits_b, "{n} changed after its MC phase");
            }
        }
    }

    #[test]
    fn determinism_same_seed_same_report() {
        let run = || {
            let mut model = build_model::<f32>(&tiny_config(7)).unwrap();
            let data = tiny_data(&model, 6, 11);
            let cfg = TrainConfig {
                epochs_initial: 1,
                epochs_cascade: 1,
                batch_size: 3,
                lr_initial: 0.05,
                seed: 9,
                ..Default::default()
            };
            let report =
                train_lc(&mut model, &data, &data, &cfg, ExecMode::Deterministic, None).unwrap();
            (model.state_dict(), report.csv())
        };
        let (pa, ca) = run();
        let (pb, cb) = run();
        assert_eq!(ca, cb);
        for ((n, a), (_, b)) in pa.iter().zip(pb.iter()) {
            let bits_a: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{n} differs across identical runs");
        }
    }

    #[test]
    fn overfit_single_image_reaches_high_final_stage_miou() {
        let mut model = build_model::<f32>(&tiny_config(8)).unwrap();
        let samples = crate::synth::gen_dataset(1, 32, 4, 12, 0.1);
        let data = prepare_items(&samples, &model).unwrap();
        let cfg = TrainConfig {
            epochs_initial: 250,
            epochs_cascade: 0,
            drop_every_initial: 100,
            drop_every_cascade: 40,
            batch_size: 1,
            lr_initial: 0.05,
            augment_hflip: false,
            seed: 4,
            ..Default::default()
        };
        initial_train(&mut model, &data, &[], &cfg, ExecMode::Fast, None).unwrap();
        // final-stage dense argmax against the training labels
        let logits = crate::cascade::dense_forward(&data[0].image, &model, ExecMode::Fast).unwrap();
        let probs = softmax_channels(&logits).unwrap();
        let (h, w) = data[0].labels.dims();
        let mut pred = LabelMap::filled(h, w, 0);
        for y in 0..h {
            for x in 0..w {
                pred.set(y, x, argmax_channels(&probs, 0, y, x).0 as u8);
            }
        }
        let mut conf = ConfusionMatrix::new(4);
        conf.add_maps(&data[0].labels, &pred);
        let (_, m) = miou(&conf).unwrap();
        assert!(m >= 0.95, "single-image overfit only reached mIoU {m}");
    }

    #[test]
    fn exit_fractions_sum_to_one_in_report() {
        let mut model = build_model::<f32>(&tiny_config(9)).unwrap();
        let data = tiny_data(&model, 5, 13);
        let cfg = TrainConfig {
            epochs_initial: 1,
            batch_size: 5,
            ..fast_cfg()
        };
        let report =
            initial_train(&mut model, &data, &[], &cfg, ExecMode::Deterministic, None).unwrap();
        for row in &report.rows {
            let s: f64 = row.exit_fractions.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "exit fractions sum to {s}");
        }
    }

    #[test]
    fn csv_header_matches_stage_count() {
        let report = TrainReport::new(3);
        assert!(report.csv().starts_with(
            "epoch,phase,lr,loss_s1,loss_s2,loss_s3,exit_s1,exit_s2,exit_s3,miou_train,miou_val"
        ));
    }
}

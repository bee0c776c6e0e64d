//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (visible with `cargo test -- --nocapture`).
//!
//! The desk-scale experiment (synthetic 4-class 64x64 task, 2000 train /
//! 200 val, 3-stage model) is trained once in a shared fixture and reused by
//! the criteria that need trained models.

use std::process::Command;
use std::sync::LazyLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use lc_core::metrics::{boundary_hits, difficulty_partition_scored};
use lc_core::ops::softmax::argmax_channels;
use lc_core::*;

const RHO_GRID: [f64; 8] = [0.8, 0.9, 0.93, 0.95, 0.97, 0.985, 0.995, 1.0];

fn pass(criterion: &str, detail: String) {
    println!("[acceptance] {criterion}: PASS ({detail})");
}

// ---------------------------------------------------------------------------
// shared desk-scale experiment
// ---------------------------------------------------------------------------

struct DeskExperiment {
    lc: CascadeModel<f32>,
    val: Vec<TrainItem<f32>>,
    lc_miou: f64,
    dsn_miou: f64,
    mc_miou: f64,
    exits_before_final: f64,
    lc_flops: u64,
    dense_flops: u64,
    /// LC training + rho=1.0 reference training + their evaluations.
    end_to_end_secs: f64,
}

fn desk_backbone(seed: u64) -> BackboneConfig {
    BackboneConfig {
        class_count: 4,
        stem_channels: vec![4, 8],
        stage_blocks: vec![1, 1, 2],
        stage_channels: vec![8, 12, 16],
        stage_dilations: vec![1, 2, 4],
        rho: 0.985,
        seed,
        ..Default::default()
    }
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr_initial: 0.05,
        epochs_initial: 6,
        epochs_cascade: 12,
        drop_every_initial: 3,
        drop_every_cascade: 6,
        seed: 5,
        ..Default::default()
    }
}

static DESK: LazyLock<DeskExperiment> = LazyLock::new(|| {
    let mode = ExecMode::Fast;
    let train_samples = gen_dataset(2000, 64, 4, 7, 0.15);
    let val_samples: Vec<SynthSample> = (0..200)
        .map(|i| gen_sample(2000 + i, 64, 4, 7, 0.15))
        .collect();

    let base = build_model::<f32>(&desk_backbone(1)).unwrap();
    let train_items = prepare_items(&train_samples, &base).unwrap();
    let val_items = prepare_items(&val_samples, &base).unwrap();
    let cfg = desk_train_config();

    // per-epoch val evaluation is skipped (empty val set): it does not touch
    // the parameter trajectory and the final evaluations below are what the
    // criteria assert
    let clock = Instant::now();
    let mut lc = base.clone();
    train_lc(&mut lc, &train_items, &[], &cfg, mode, None).unwrap();
    let (_, lc_miou) = eval_confusion(&lc, &val_items, Some(0.985), mode).unwrap();

    let mut dsn = base.clone();
    train_dsn(&mut dsn, &train_items, &[], &cfg, mode, None).unwrap();
    let (_, dsn_miou) = eval_confusion(&dsn, &val_items, Some(1.0), mode).unwrap();

    let mut lc_flops = 0u64;
    let mut exits_before_final = 0.0;
    for item in &val_items {
        let out = infer(&item.image, &lc, Some(0.985), mode).unwrap();
        lc_flops += out.ledger.total_flops();
        let f = out.exit_fractions();
        exits_before_final += f[..f.len() - 1].iter().sum::<f64>();
    }
    exits_before_final /= val_items.len() as f64;
    let end_to_end_secs = clock.elapsed().as_secs_f64();

    let mut mc = base.clone();
    mc_baseline_train(&mut mc, &train_items, &[], &cfg, mode, None).unwrap();
    let (_, mc_miou) = eval_confusion(&mc, &val_items, Some(0.985), mode).unwrap();

    let dense_flops = lc.dense_flops(64, 64).unwrap() * val_items.len() as u64;
    DeskExperiment {
        lc,
        val: val_items,
        lc_miou,
        dsn_miou,
        mc_miou,
        exits_before_final,
        lc_flops,
        dense_flops,
        end_to_end_secs,
    }
});

// ---------------------------------------------------------------------------
// small random fixtures
// ---------------------------------------------------------------------------

fn tiny_backbone(seed: u64) -> BackboneConfig {
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

fn rand_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::randn(Shape4::new(1, 3, h, w), 1.0, &mut rng)
}

// ---------------------------------------------------------------------------
// criteria
// ---------------------------------------------------------------------------

#[test]
fn acceptance_c01_region_conv_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1001);
    let mut worst32 = 0.0f64;
    let mut worst64 = 0.0f64;
    for case in 0..200 {
        let kernel = [1usize, 3, 5][case % 3];
        let dilation = 1 + case % 3;
        let pad = dilation * (kernel - 1) / 2;
        let in_c = 1 + case % 3;
        let out_c = 1 + (case / 3) % 3;
        let spec = ConvSpec::new(in_c, out_c, (kernel, kernel))
            .with_dilation(dilation)
            .with_padding(pad)
            .with_bias(case % 2 == 0);
        let (h, w) = (6 + case % 5, 6 + (case / 5) % 5);
        let density: f64 = rng.random();
        let mask = RegionMask::from_fn(h, w, |_, _| rng.random::<f64>() < density);

        let x64: Tensor<f64> = Tensor::randn(Shape4::new(1, in_c, h, w), 1.0, &mut rng);
        let w64: Tensor<f64> = Tensor::randn(spec.weight_shape(), 0.6, &mut rng);
        let b64: Option<Vec<f64>> = spec
            .has_bias
            .then(|| (0..out_c).map(|_| rng.random::<f64>() - 0.5).collect());

        // f64 path vs oracle: mask -> dense conv -> mask
        let got64 = region_conv_forward(
            &x64,
            &mask,
            &spec,
            &w64,
            b64.as_deref(),
            ExecMode::Deterministic,
        )
        .unwrap();
        let masked = lc_core::region::mask_zero_outside(&x64, &mask);
        let dense =
            conv2d_forward(&masked, &spec, &w64, b64.as_deref(), ExecMode::Deterministic).unwrap();
        let want64 = lc_core::region::mask_zero_outside(&dense, &mask);
        worst64 = worst64.max(got64.max_abs_diff(&want64));

        // f32 path vs the same oracle computed in f32
        let x32 = x64.cast::<f32>();
        let w32 = w64.cast::<f32>();
        let b32: Option<Vec<f32>> =
            b64.as_ref().map(|b| b.iter().map(|v| *v as f32).collect());
        let got32 = region_conv_forward(
            &x32,
            &mask,
            &spec,
            &w32,
            b32.as_deref(),
            ExecMode::Deterministic,
        )
        .unwrap();
        let masked = lc_core::region::mask_zero_outside(&x32, &mask);
        let dense =
            conv2d_forward(&masked, &spec, &w32, b32.as_deref(), ExecMode::Deterministic).unwrap();
        let want32 = lc_core::region::mask_zero_outside(&dense, &mask);
        worst32 = worst32.max(got32.max_abs_diff(&want32));
    }
    assert!(worst32 < 1e-5, "32-bit worst diff {worst32}");
    assert!(worst64 < 1e-10, "64-bit worst diff {worst64}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "oracle equivalence took {secs}s (budget 60s)");
    pass(
        "C1 region-conv oracle equivalence",
        format!("200 cases, max|diff| f32 {worst32:.2e}, f64 {worst64:.2e}, {secs:.1}s"),
    );
}

#[test]
fn acceptance_c02_gradient_suite() {
    let start = Instant::now();
    let outcomes = gradcheck::run_suite(20, 1e-5);
    let mut detail = Vec::new();
    for o in &outcomes {
        assert!(
            o.max_rel_err < 1e-3,
            "{} rel err {} breaches the 1e-3 criterion",
            o.op,
            o.max_rel_err
        );
        assert!(
            o.passed(),
            "{} rel err {} over its {} threshold",
            o.op,
            o.max_rel_err,
            o.threshold
        );
        detail.push(format!("{} {:.1e}", o.op, o.max_rel_err));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "gradient suite took {secs}s (budget 300s)");
    pass(
        "C2 gradient suite",
        format!("20 seeds/op, {}; {secs:.1}s", detail.join(", ")),
    );
}

#[test]
fn acceptance_c03_rho_one_degeneracy() {
    let mut checked = 0usize;
    let mut worst = 0.0f64;
    for model_seed in 0..5u64 {
        let model = build_model::<f32>(&tiny_backbone(model_seed)).unwrap();
        for input_seed in 0..10u64 {
            let img = rand_image(model_seed * 100 + input_seed, 24, 24);
            let out = infer(&img, &model, Some(1.0), ExecMode::Deterministic).unwrap();
            let dense = dense_forward(&img, &model, ExecMode::Deterministic).unwrap();
            let lc_logits = &out.predictions.last().unwrap().logits;
            worst = worst.max(lc_logits.max_abs_diff(&dense));
            let probs = softmax_channels(&dense).unwrap();
            let (h, w) = out.labels.dims();
            for y in 0..h {
                for x in 0..w {
                    let (c, _) = argmax_channels(&probs, 0, y, x);
                    assert_eq!(
                        out.labels.get(y, x),
                        c as u8,
                        "argmax mismatch at ({y},{x}), model {model_seed}, input {input_seed}"
                    );
                }
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 50);
    assert!(worst < 1e-5, "per-logit diff {worst}");
    pass(
        "C3 rho=1.0 degeneracy",
        format!("50 inputs argmax-identical, max logit diff {worst:.2e}"),
    );
}

#[test]
fn acceptance_c04_routing_invariants() {
    let mut count = 0usize;
    for model_seed in 0..10u64 {
        let model = build_model::<f32>(&tiny_backbone(50 + model_seed)).unwrap();
        for input_seed in 0..10u64 {
            let img = rand_image(7000 + model_seed * 37 + input_seed, 24, 24);
            // coverage at a mid threshold
            let out = infer(&img, &model, Some(0.5), ExecMode::Deterministic).unwrap();
            let (h, w) = out.labels.dims();
            let mut coverage = vec![0u32; h * w];
            for p in &out.predictions {
                for y in 0..h {
                    for x in 0..w {
                        if p.exit_mask.get(y, x) {
                            coverage[y * w + x] += 1;
                        }
                    }
                }
            }
            assert!(
                coverage.iter().all(|&c| c == 1),
                "pixel covered != 1 time (model {model_seed}, input {input_seed})"
            );
            // stage-1 exit fraction non-increasing along the rho grid
            let mut prev = f64::INFINITY;
            for rho in RHO_GRID {
                let out = infer(&img, &model, Some(rho), ExecMode::Deterministic).unwrap();
                let f1 = out.exit_fractions()[0];
                assert!(
                    f1 <= prev + 1e-12,
                    "stage-1 exit fraction increased: {prev} -> {f1} at rho {rho}"
                );
                prev = f1;
            }
            count += 1;
        }
    }
    assert_eq!(count, 100);
    pass(
        "C4 routing invariants",
        format!("100 inferences, exact coverage, stage-1 exits monotone over {RHO_GRID:?}"),
    );
}

#[test]
fn acceptance_c05_desk_scale_end_to_end() {
    let d = &*DESK;
    let flop_ratio = d.lc_flops as f64 / d.dense_flops as f64;
    assert!(
        d.exits_before_final >= 0.25,
        "(a) only {:.1}% of pixels exit before the final stage",
        d.exits_before_final * 100.0
    );
    assert!(
        flop_ratio <= 0.75,
        "(b) ledger flops are {:.1}% of dense (limit 75%)",
        flop_ratio * 100.0
    );
    assert!(
        d.lc_miou >= d.dsn_miou - 0.02,
        "(c) LC mIoU {:.4} more than 2 points below the rho=1.0 run {:.4}",
        d.lc_miou,
        d.dsn_miou
    );
    assert!(
        d.end_to_end_secs <= 1800.0,
        "end-to-end runtime {:.0}s over the 30 min budget",
        d.end_to_end_secs
    );
    pass(
        "C5 desk-scale end-to-end",
        format!(
            "exits {:.1}%, flops {:.1}% of dense, mIoU {:.4} vs rho=1.0 {:.4}, {:.0}s",
            d.exits_before_final * 100.0,
            flop_ratio * 100.0,
            d.lc_miou,
            d.dsn_miou,
            d.end_to_end_secs
        ),
    );
}

#[test]
fn acceptance_c06_baseline_ordering() {
    let d = &*DESK;
    assert!(
        d.lc_miou >= d.mc_miou,
        "joint LC mIoU {:.4} below separately trained MC {:.4}",
        d.lc_miou,
        d.mc_miou
    );
    pass(
        "C6 baseline ordering",
        format!("LC {:.4} >= MC {:.4}", d.lc_miou, d.mc_miou),
    );
}

#[test]
fn acceptance_c07_kernel_benchmark() {
    // flop-ledger exactness at every density
    let spec = ConvSpec::new(64, 64, (3, 3)).with_padding(1);
    let total = 128 * 128;
    let dense_flops = flop_count(&spec, total);
    for (num, den) in [(1usize, 4usize), (1, 2), (3, 4), (1, 1)] {
        let active = total * num / den;
        assert_eq!(
            flop_count(&spec, active) * den as u64,
            dense_flops * num as u64,
            "ledger not exactly linear at density {num}/{den}"
        );
    }

    // wall-time medians: region conv must win at low density and stay close
    // at full density (dense fallback)
    let mk_mask = |density: f64| {
        let target = (total as f64 * density).round() as usize;
        let mut mask = RegionMask::empty(128, 128);
        let mut placed = 0usize;
        let mut idx = 0u64;
        while placed < target {
            let pos = (idx.wrapping_mul(2654435761) % total as u64) as usize;
            if !mask.get(pos / 128, pos % 128) {
                mask.set(pos / 128, pos % 128, true);
                placed += 1;
            }
            idx += 1;
        }
        mask
    };
    let mut rng = ChaCha20Rng::seed_from_u64(4242);
    let x: Tensor<f32> = Tensor::randn(Shape4::new(1, 64, 128, 128), 1.0, &mut rng);
    let w: Tensor<f32> = Tensor::randn(spec.weight_shape(), 0.1, &mut rng);
    let median = |mut v: Vec<f64>| {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let time_pair = |mask: &RegionMask| {
        let mut dense_t = Vec::new();
        let mut rc_t = Vec::new();
        for _ in 0..20 {
            let t = Instant::now();
            std::hint::black_box(conv2d_forward(&x, &spec, &w, None, ExecMode::Fast).unwrap());
            dense_t.push(t.elapsed().as_secs_f64());
            let t = Instant::now();
            std::hint::black_box(
                region_conv_forward(&x, mask, &spec, &w, None, ExecMode::Fast).unwrap(),
            );
            rc_t.push(t.elapsed().as_secs_f64());
        }
        (median(dense_t), median(rc_t))
    };

    let quarter = mk_mask(0.25);
    let (dense_ms, rc_ms) = time_pair(&quarter);
    let ratio_quarter = rc_ms / dense_ms;
    assert!(
        ratio_quarter <= 0.7,
        "density 0.25: RC {:.2}ms vs dense {:.2}ms (ratio {:.2}, limit 0.7)",
        rc_ms * 1e3,
        dense_ms * 1e3,
        ratio_quarter
    );

    let full = mk_mask(1.0);
    let (dense_ms2, rc_ms2) = time_pair(&full);
    let ratio_full = rc_ms2 / dense_ms2;
    assert!(
        ratio_full <= 1.3,
        "density 1.0: RC {:.2}ms vs dense {:.2}ms (ratio {:.2}, limit 1.3)",
        rc_ms2 * 1e3,
        dense_ms2 * 1e3,
        ratio_full
    );
    pass(
        "C7 kernel benchmark",
        format!(
            "density 0.25 ratio {ratio_quarter:.2} (<=0.7), density 1.0 ratio {ratio_full:.2} \
             (<=1.3), ledger exactly linear"
        ),
    );
}

#[test]
fn acceptance_c08_gradient_masking() {
    let d = &*DESK;
    let mut restricted_stages = 0usize;
    for batch in 0..20 {
        let item = &d.val[batch * 7 % d.val.len()];
        let probe =
            lc_core::train::cascade_gradient_probe(&d.lc, item, 0.985, ExecMode::Deterministic)
                .unwrap();
        for (grad, contrib) in probe
            .stage_grad_logits
            .iter()
            .zip(probe.stage_contrib.iter())
        {
            if !contrib.is_full() {
                restricted_stages += 1;
            }
            let s = grad.shape();
            for y in 0..s.h {
                for x in 0..s.w {
                    if !contrib.get(y, x) {
                        for c in 0..s.c {
                            assert_eq!(
                                grad.at(0, c, y, x).to_bits(),
                                0.0f32.to_bits(),
                                "nonzero gradient at non-forwarded pixel ({y},{x}) in batch {batch}"
                            );
                        }
                    }
                }
            }
        }
    }
    assert!(restricted_stages >= 20, "too few restricted stage losses");
    pass(
        "C8 gradient masking",
        format!("20 batches, {restricted_stages} restricted stage losses, all bit-zero outside"),
    );
}

#[test]
fn acceptance_c09_train_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let lc_bin = env!("CARGO_BIN_EXE_lc");

    let status = Command::new(lc_bin)
        .args([
            "gen-data",
            "--out",
            data.to_str().unwrap(),
            "--train-count",
            "24",
            "--val-count",
            "8",
            "--size",
            "32",
            "--ambiguity",
            "0.1",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "backbone": {
                "class_count": 4,
                "stem_channels": [4, 6],
                "stage_blocks": [1, 1, 1],
                "stage_channels": [6, 8, 10],
                "stage_dilations": [1, 2, 2],
            },
            "train": {
                "batch_size": 4,
                "lr_initial": 0.05,
                "epochs_initial": 2,
                "epochs_cascade": 2,
                "drop_every_initial": 2,
                "drop_every_cascade": 2,
            }
        })
        .to_string(),
    )
    .unwrap();

    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let status = Command::new(lc_bin)
            .args([
                "train",
                "--config",
                cfg_path.to_str().unwrap(),
                "--data",
                data.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--deterministic",
                "--seed",
                "5",
            ])
            .status()
            .unwrap();
        assert!(status.success());
        (
            std::fs::read(out_dir.join("final.lckp")).unwrap(),
            std::fs::read(out_dir.join("report.csv")).unwrap(),
        )
    };
    let (ckpt_a, csv_a) = run("run_a");
    let (ckpt_b, csv_b) = run("run_b");
    assert_eq!(ckpt_a, ckpt_b, "final checkpoints differ between runs");
    assert_eq!(csv_a, csv_b, "report CSVs differ between runs");
    pass(
        "C9 train determinism",
        format!(
            "two cmd_train runs byte-identical ({} byte checkpoint, {} byte CSV)",
            ckpt_a.len(),
            csv_a.len()
        ),
    );
}

#[test]
fn acceptance_c10_difficulty_tooling() {
    let d = &*DESK;
    let mut hs_hits = 0u64;
    let mut hs_total = 0u64;
    let mut all_hits = 0u64;
    let mut all_total = 0u64;
    for item in &d.val {
        let out = infer(&item.image, &d.lc, Some(0.985), ExecMode::Fast).unwrap();
        let conf = out.merged_confidence();
        let part = difficulty_partition_scored(&conf, &out.labels, &item.labels, 0.95);
        // exact partition: each evaluated pixel in exactly one set
        let (h, w) = item.labels.dims();
        let mut evaluated = RegionMask::empty(h, w);
        for y in 0..h {
            for x in 0..w {
                let members = part.es.get(y, x) as u8
                    + part.ms.get(y, x) as u8
                    + part.hs.get(y, x) as u8;
                let expected = (item.labels.get(y, x) != IGNORE_LABEL) as u8;
                assert_eq!(members, expected, "difficulty sets not a partition at ({y},{x})");
                if expected == 1 {
                    evaluated.set(y, x, true);
                }
            }
        }
        let (hits, total) = boundary_hits(&part.hs, &item.labels, 2);
        hs_hits += hits;
        hs_total += total;
        let (hits, total) = boundary_hits(&evaluated, &item.labels, 2);
        all_hits += hits;
        all_total += total;
    }
    assert!(hs_total > 0, "no confidently-wrong pixels on the val set");
    let bf_hs = hs_hits as f64 / hs_total as f64;
    let bf_all = all_hits as f64 / all_total as f64;
    assert!(
        bf_hs > bf_all,
        "HS boundary fraction {bf_hs:.3} not above the all-pixel fraction {bf_all:.3}"
    );
    pass(
        "C10 difficulty tooling",
        format!(
            "partition exact on 200 images; boundary fraction HS {bf_hs:.3} > all {bf_all:.3} \
             ({hs_total} HS pixels)"
        ),
    );
}

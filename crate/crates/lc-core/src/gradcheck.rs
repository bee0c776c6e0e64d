//! Central finite-difference verification of every backward pass.
//!
//! Each checked op is wrapped as a scalar loss (a fixed random weighting of
//! its output), the analytic gradient comes from the op's own backward pass,
//! and the numeric gradient perturbs one input element at a time. All checks
//! run in f64 and are deterministic given a seed.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::exec::ExecMode;
use crate::label::LabelMap;
use crate::layers::{conv_layer, Grads, Layer, ResidualBlock};
use crate::ops::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::ops::loss::masked_cross_entropy;
use crate::ops::norm::AffineNorm;
use crate::ops::softmax::softmax_channels;
use crate::region::{region_conv_backward, region_conv_forward, RegionMask};
use crate::tensor::{Shape4, Tensor};

const MODE: ExecMode = ExecMode::Deterministic;

/// Result of checking one op across all requested seeds.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub op: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub seeds: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Ops covered by the gradient suite, with their pass thresholds.
pub const CHECKED_OPS: &[(&str, f64)] = &[
    ("conv_1x1_linear", 1e-10),
    ("conv_3x3", 1e-4),
    ("conv_3x3_dilated", 1e-4),
    ("conv_3x3_strided", 1e-4),
    ("region_conv", 1e-4),
    ("masked_residual", 1e-3),
    ("relu", 1e-8),
    ("affine_norm", 1e-8),
    ("softmax_cross_entropy", 1e-4),
];

struct Case {
    inputs: Vec<Tensor<f64>>,
    analytic: Vec<Vec<f64>>,
    loss: Box<dyn Fn(&[Tensor<f64>]) -> f64>,
}

// relative error with a unit floor, the usual gradcheck metric
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1.0f64.max(a.abs()).max(n.abs())
}

fn run_case(case: &Case, step: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut inputs: Vec<Tensor<f64>> = case.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + step;
            let up = (case.loss)(&inputs);
            inputs[i].data_mut()[j] = orig - step;
            let down = (case.loss)(&inputs);
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(rel_err(case.analytic[i][j], numeric));
        }
    }
    worst
}

fn weighted_sum(out: &Tensor<f64>, coeffs: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(coeffs.data().iter())
        .map(|(a, b)| a * b)
        .sum()
}

fn conv_case(spec: ConvSpec, batch: usize, in_hw: (usize, usize), seed: u64, scale: f64) -> Case {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let x: Tensor<f64> = Tensor::randn(
        Shape4::new(batch, spec.in_channels, in_hw.0, in_hw.1),
        scale,
        &mut rng,
    );
    let w: Tensor<f64> = Tensor::randn(spec.weight_shape(), 0.5 * scale, &mut rng);
    let b: Tensor<f64> = Tensor::randn(Shape4::new(1, spec.out_channels, 1, 1), 0.5, &mut rng);
    let (oh, ow) = spec.out_hw(in_hw.0, in_hw.1).unwrap();
    let coeffs: Tensor<f64> =
        Tensor::randn(Shape4::new(batch, spec.out_channels, oh, ow), scale, &mut rng);

    let (gx, gw, gb) = conv2d_backward(&coeffs, &x, &spec, &w, MODE).unwrap();
    let analytic = vec![gx.into_data(), gw.into_data(), gb.unwrap()];
    let loss = move |inp: &[Tensor<f64>]| {
        let out = conv2d_forward(&inp[0], &spec, &inp[1], Some(inp[2].data()), MODE).unwrap();
        weighted_sum(&out, &coeffs)
    };
    Case {
        inputs: vec![x, w, b],
        analytic,
        loss: Box::new(loss),
    }
}

fn region_conv_case(seed: u64) -> Case {
    use rand::Rng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let spec = ConvSpec::new(2, 3, (3, 3)).with_padding(1).with_bias(true);
    let (h, w_dim) = (6, 6);
    let mask = RegionMask::from_fn(h, w_dim, |_, _| rng.random::<f64>() < 0.5);
    let x: Tensor<f64> = Tensor::randn(Shape4::new(1, 2, h, w_dim), 1.0, &mut rng);
    let w: Tensor<f64> = Tensor::randn(spec.weight_shape(), 0.5, &mut rng);
    let b: Tensor<f64> = Tensor::randn(Shape4::new(1, 3, 1, 1), 0.5, &mut rng);
    let coeffs: Tensor<f64> = Tensor::randn(Shape4::new(1, 3, h, w_dim), 1.0, &mut rng);

    let (gx, gw, gb) = region_conv_backward(&coeffs, &x, &mask, &spec, &w, MODE).unwrap();
    let analytic = vec![gx.into_data(), gw.into_data(), gb.unwrap()];
    let loss = move |inp: &[Tensor<f64>]| {
        let out =
            region_conv_forward(&inp[0], &mask, &spec, &inp[1], Some(inp[2].data()), MODE).unwrap();
        weighted_sum(&out, &coeffs)
    };
    Case {
        inputs: vec![x, w, b],
        analytic,
        loss: Box::new(loss),
    }
}

fn masked_residual_case(seed: u64) -> Case {
    use rand::Rng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let spec = ConvSpec::new(2, 2, (3, 3)).with_padding(1);
    let (h, w_dim) = (5, 5);
    let mask = RegionMask::from_fn(h, w_dim, |_, _| rng.random::<f64>() < 0.6);
    let x: Tensor<f64> = Tensor::randn(Shape4::new(1, 2, h, w_dim), 1.0, &mut rng);
    let w1: Tensor<f64> = Tensor::randn(spec.weight_shape(), 0.5, &mut rng);
    let w2: Tensor<f64> = Tensor::randn(spec.weight_shape(), 0.5, &mut rng);
    let coeffs: Tensor<f64> = Tensor::randn(Shape4::new(1, 2, h, w_dim), 1.0, &mut rng);

    let build = move |w1: &Tensor<f64>, w2: &Tensor<f64>| {
        Layer::Residual(ResidualBlock {
            body: vec![
                Layer::Rc(conv_layer(spec, w1.clone(), None)),
                Layer::Rc(conv_layer(spec, w2.clone(), None)),
            ],
        })
    };

    let block = build(&w1, &w2);
    let (_, cache) = block.forward_train(&x, Some(&mask), MODE).unwrap();
    let mut grads = Grads::new();
    let gx = block
        .backward("r", &coeffs, &cache, Some(&mask), MODE, &mut grads)
        .unwrap();
    let analytic = vec![
        gx.into_data(),
        grads.get("r.0.weight").unwrap().to_vec(),
        grads.get("r.1.weight").unwrap().to_vec(),
    ];

    let mask2 = mask.clone();
    let loss = move |inp: &[Tensor<f64>]| {
        let block = build(&inp[1], &inp[2]);
        let out = block.forward(&inp[0], Some(&mask2), MODE).unwrap();
        weighted_sum(&out, &coeffs)
    };
    Case {
        inputs: vec![x, w1, w2],
        analytic,
        loss: Box::new(loss),
    }
}

fn relu_case(seed: u64) -> Case {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut x: Tensor<f64> = Tensor::randn(Shape4::new(1, 2, 4, 4), 1.0, &mut rng);
    // keep elements away from the kink at 0 so central differences are exact
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1 * v.signum();
            if *v == 0.0 {
                *v = 0.1;
            }
        }
    }
    let coeffs: Tensor<f64> = Tensor::randn(x.shape(), 1.0, &mut rng);
    let gx = crate::ops::elementwise::relu_backward(&coeffs, &x);
    let analytic = vec![gx.into_data()];
    let loss = move |inp: &[Tensor<f64>]| {
        weighted_sum(&crate::ops::elementwise::relu_forward(&inp[0]), &coeffs)
    };
    Case {
        inputs: vec![x],
        analytic,
        loss: Box::new(loss),
    }
}

fn affine_case(seed: u64) -> Case {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let c = 3;
    let x: Tensor<f64> = Tensor::randn(Shape4::new(1, c, 4, 4), 1.0, &mut rng);
    let scale: Tensor<f64> = Tensor::randn(Shape4::new(1, c, 1, 1), 0.5, &mut rng);
    let shift: Tensor<f64> = Tensor::randn(Shape4::new(1, c, 1, 1), 0.5, &mut rng);
    let coeffs: Tensor<f64> = Tensor::randn(x.shape(), 1.0, &mut rng);

    let build = |scale: &Tensor<f64>, shift: &Tensor<f64>| AffineNorm {
        scale: scale.clone(),
        shift: shift.clone(),
        frozen: false,
    };
    let norm = build(&scale, &shift);
    let (gx, param_grads) = norm.backward(&coeffs, &x);
    let (gs, gb) = param_grads.unwrap();
    let analytic = vec![gx.into_data(), gs, gb];
    let loss = move |inp: &[Tensor<f64>]| {
        let norm = AffineNorm {
            scale: inp[1].clone(),
            shift: inp[2].clone(),
            frozen: false,
        };
        weighted_sum(&norm.apply(&inp[0]).unwrap(), &coeffs)
    };
    Case {
        inputs: vec![x, scale, shift],
        analytic,
        loss: Box::new(loss),
    }
}

fn softmax_ce_case(seed: u64) -> Case {
    use rand::Rng;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let k = 4;
    let (h, w_dim) = (4, 4);
    let logits: Tensor<f64> = Tensor::randn(Shape4::new(1, k, h, w_dim), 1.5, &mut rng);
    let mut targets = LabelMap::filled(h, w_dim, 0);
    for y in 0..h {
        for x in 0..w_dim {
            let t = if rng.random::<f64>() < 0.15 {
                255
            } else {
                rng.random_range(0..k) as u8
            };
            targets.set(y, x, t);
        }
    }
    let mask = RegionMask::from_fn(h, w_dim, |_, _| rng.random::<f64>() < 0.7);

    let probs = softmax_channels(&logits).unwrap();
    let (_, grad_logits) = masked_cross_entropy(&probs, &targets, &mask, 255).unwrap();
    let analytic = vec![grad_logits.into_data()];
    let loss = move |inp: &[Tensor<f64>]| {
        let probs = softmax_channels(&inp[0]).unwrap();
        masked_cross_entropy(&probs, &targets, &mask, 255).unwrap().0
    };
    Case {
        inputs: vec![logits],
        analytic,
        loss: Box::new(loss),
    }
}

fn build_case(op: &str, seed: u64) -> Case {
    match op {
        // small magnitudes: finite differences of a linear map are exact up
        // to rounding, and the rounding floor scales with the loss value
        "conv_1x1_linear" => conv_case(
            ConvSpec::new(1, 1, (1, 1)).with_bias(true),
            1,
            (3, 3),
            seed,
            0.3,
        ),
        "conv_3x3" => conv_case(
            ConvSpec::new(3, 4, (3, 3)).with_padding(1).with_bias(true),
            2,
            (5, 5),
            seed,
            1.0,
        ),
        "conv_3x3_dilated" => conv_case(
            ConvSpec::new(2, 2, (3, 3))
                .with_dilation(2)
                .with_padding(2)
                .with_bias(true),
            1,
            (6, 6),
            seed,
            1.0,
        ),
        "conv_3x3_strided" => conv_case(
            ConvSpec::new(3, 4, (3, 3))
                .with_stride(2)
                .with_padding(1)
                .with_bias(true),
            1,
            (7, 7),
            seed,
            1.0,
        ),
        "region_conv" => region_conv_case(seed),
        "masked_residual" => masked_residual_case(seed),
        "relu" => relu_case(seed),
        "affine_norm" => affine_case(seed),
        "softmax_cross_entropy" => softmax_ce_case(seed),
        other => panic!("unknown gradcheck op {other}"),
    }
}

/// Max relative error of one op for one seed.
pub fn check_op(op: &str, seed: u64, step: f64) -> f64 {
    run_case(&build_case(op, seed), step)
}

/// Run the whole suite: every op, `seeds` seeds each.
pub fn run_suite(seeds: usize, step: f64) -> Vec<CheckOutcome> {
    CHECKED_OPS
        .iter()
        .map(|&(op, threshold)| {
            let mut worst = 0.0f64;
            for s in 0..seeds {
                worst = worst.max(check_op(op, s as u64, step));
            }
            CheckOutcome {
                op: op.to_string(),
                max_rel_err: worst,
                threshold,
                seeds,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact_to_rounding() {
        for seed in 0..5 {
            assert!(check_op("conv_1x1_linear", seed, 1e-5) < 1e-10);
        }
    }

    #[test]
    fn dilated_conv_passes_fd() {
        for seed in 0..5 {
            assert!(check_op("conv_3x3_dilated", seed, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn softmax_ce_composite_passes_fd() {
        for seed in 0..5 {
            assert!(check_op("softmax_cross_entropy", seed, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn region_conv_passes_fd() {
        for seed in 0..5 {
            assert!(check_op("region_conv", seed, 1e-5) < 1e-4);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = check_op("conv_3x3", 7, 1e-5);
        let b = check_op("conv_3x3", 7, 1e-5);
        assert_eq!(a, b);
    }
}

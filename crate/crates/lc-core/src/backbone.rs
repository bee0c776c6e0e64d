//! Build the desk-scale three-stage backbone from a declarative config:
//! a strided dense stem, per-stage pre-activation residual blocks with
//! dilated region convolutions and frozen affine norms, 1x1 channel
//! transitions between stages, and a two-conv classification head per stage.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeModel, Stage};
use crate::error::{LcError, Result};
use crate::layers::{conv_layer, Layer, ResidualBlock};
use crate::ops::conv::ConvSpec;
use crate::ops::norm::AffineNorm;
use crate::tensor::{Elem, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub class_count: usize,
    pub input_channels: usize,
    /// Output channels of each stride-2 stem conv; the last entry must equal
    /// the first stage's channel count. Two entries give total stride 4.
    pub stem_channels: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_dilations: Vec<usize>,
    pub rho: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> BackboneConfig {
        BackboneConfig {
            class_count: 4,
            input_channels: 3,
            stem_channels: vec![16, 32],
            stage_blocks: vec![2, 2, 2],
            stage_channels: vec![32, 48, 64],
            stage_dilations: vec![1, 2, 4],
            rho: 0.985,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(LcError::config("class_count must be at least 2"));
        }
        if self.input_channels == 0 {
            return Err(LcError::config("input_channels must be positive"));
        }
        let s = self.stage_channels.len();
        if s == 0 {
            return Err(LcError::config("at least one stage is required"));
        }
        if self.stage_blocks.len() != s || self.stage_dilations.len() != s {
            return Err(LcError::config(format!(
                "stage_blocks ({}), stage_channels ({}) and stage_dilations ({}) must have \
                 the same length",
                self.stage_blocks.len(),
                s,
                self.stage_dilations.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(LcError::config("stage channels must be positive"));
        }
        if self.stage_dilations.iter().any(|&d| d == 0) {
            return Err(LcError::config("stage dilations must be positive"));
        }
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return Err(LcError::config("stage block counts must be positive"));
        }
        if self.stem_channels.is_empty() {
            return Err(LcError::config("stem needs at least one conv"));
        }
        if *self.stem_channels.last().unwrap() != self.stage_channels[0] {
            return Err(LcError::config(format!(
                "last stem channel count {} must equal stage-1 channels {}",
                self.stem_channels.last().unwrap(),
                self.stage_channels[0]
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(LcError::config(format!(
                "rho must be in (0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// Total stem stride (2 per stem conv).
    pub fn stem_stride(&self) -> usize {
        1 << self.stem_channels.len()
    }
}

fn he_weight<T: Elem>(spec: &ConvSpec, rng: &mut ChaCha20Rng) -> Tensor<T> {
    let fan_in = (spec.in_channels * spec.kernel.0 * spec.kernel.1) as f64;
    Tensor::randn(spec.weight_shape(), (2.0 / fan_in).sqrt(), rng)
}

fn head_weight<T: Elem>(spec: &ConvSpec, rng: &mut ChaCha20Rng) -> Tensor<T> {
    Tensor::randn(spec.weight_shape(), 0.01, rng)
}

fn residual_block<T: Elem>(channels: usize, dilation: usize, rng: &mut ChaCha20Rng) -> Layer<T> {
    let spec = ConvSpec::new(channels, channels, (3, 3))
        .with_dilation(dilation)
        .with_padding(dilation);
    let mut body = Vec::new();
    for _ in 0..2 {
        body.push(Layer::Affine(AffineNorm::identity(channels)));
        body.push(Layer::Relu);
        body.push(Layer::Rc(conv_layer(spec, he_weight(&spec, rng), None)));
    }
    Layer::Residual(ResidualBlock { body })
}

/// Deterministic model construction: same config and seed give bit-identical
/// parameters.
pub fn build_model<T: Elem>(config: &BackboneConfig) -> Result<CascadeModel<T>> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    let mut stem = Vec::new();
    let mut in_c = config.input_channels;
    for &ch in &config.stem_channels {
        let spec = ConvSpec::new(in_c, ch, (3, 3)).with_stride(2).with_padding(1);
        stem.push(Layer::Conv(conv_layer(spec, he_weight(&spec, &mut rng), None)));
        stem.push(Layer::Affine(AffineNorm::identity(ch)));
        stem.push(Layer::Relu);
        in_c = ch;
    }

    let mut stages = Vec::new();
    let mut transitions = Vec::new();
    for (k, (&channels, &dilation)) in config
        .stage_channels
        .iter()
        .zip(config.stage_dilations.iter())
        .enumerate()
    {
        if k > 0 {
            let spec = ConvSpec::new(config.stage_channels[k - 1], channels, (1, 1));
            transitions.push(vec![
                Layer::Rc(conv_layer(spec, he_weight(&spec, &mut rng), None)),
                Layer::Affine(AffineNorm::identity(channels)),
                Layer::Relu,
            ]);
        }

        let body: Vec<Layer<T>> = (0..config.stage_blocks[k])
            .map(|_| residual_block(channels, dilation, &mut rng))
            .collect();

        let head_spec1 = ConvSpec::new(channels, channels, (3, 3))
            .with_padding(1)
            .with_bias(true);
        let head_spec2 = ConvSpec::new(channels, config.class_count, (1, 1)).with_bias(true);
        let head = vec![
            Layer::Rc(conv_layer(
                head_spec1,
                head_weight(&head_spec1, &mut rng),
                Some(vec![T::ZERO; channels]),
            )),
            Layer::Relu,
            Layer::Rc(conv_layer(
                head_spec2,
                head_weight(&head_spec2, &mut rng),
                Some(vec![T::ZERO; config.class_count]),
            )),
        ];

        stages.push(Stage {
            body,
            head,
            dilation,
        });
    }

    Ok(CascadeModel {
        stem,
        stages,
        transitions,
        rho: config.rho,
        class_count: config.class_count,
        trained_phase: None,
    })
}

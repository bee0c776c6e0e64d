//! Layer-cascade semantic segmentation engine.
//!
//! A single network is partitioned into sequential stages, each with its own
//! classifier head. Pixels whose max softmax probability reaches the
//! threshold rho exit at the current stage; the rest are forwarded, and
//! later stages evaluate their convolutions only on the forwarded region
//! (region convolution). Training runs in two phases: full-image supervision
//! at every head, then cascade training with per-stage losses restricted to
//! each stage's region.
//!
//! The crate is CPU-only and built for desk-scale experiments: deterministic
//! kernels, analytic FLOP accounting, synthetic data generation, and
//! difficulty analysis tooling.

pub mod backbone;
pub mod cascade;
pub mod checkpoint;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod imgio;
pub mod label;
pub mod layers;
pub mod metrics;
pub mod ops;
pub mod region;
pub mod synth;
pub mod tensor;
pub mod train;

pub use backbone::{build_model, BackboneConfig};
pub use cascade::{
    dense_forward, infer, merge, route, run_stage, CascadeModel, FlopLedger, InferOutput, Stage,
    StageLedger, StagePrediction,
};
pub use checkpoint::{load_model, read_checkpoint, save_model, write_checkpoint, TrainPhase};
pub use error::{LcError, Result};
pub use exec::ExecMode;
pub use label::{LabelMap, IGNORE_LABEL};
pub use metrics::{
    boundary_fraction, difficulty_partition, miou, stage_stats, ConfusionMatrix,
    DifficultyPartition, StageStats, DIFFICULTY_THRESHOLD,
};
pub use ops::conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use ops::loss::masked_cross_entropy;
pub use ops::norm::AffineNorm;
pub use ops::optim::OptimizerState;
pub use ops::softmax::softmax_channels;
pub use region::{
    flop_count, mask_from_confidence, region_conv_backward, region_conv_forward, RegionMask,
};
pub use synth::{gen_dataset, gen_sample, SynthSample};
pub use tensor::{Dtype, Elem, Shape4, Tensor};
pub use train::{
    cascade_train, eval_confusion, initial_train, lr_schedule, mc_baseline_train, prepare_items,
    prepare_pairs, train_dsn, train_dsn_dropout, train_lc, CheckpointCadence, TrainConfig,
    TrainItem, TrainReport,
};

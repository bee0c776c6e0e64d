//! Kernel-level operations: convolution, activations, normalization,
//! softmax, masked loss, and the SGD update.

pub mod conv;
pub mod elementwise;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod softmax;

pub use conv::{conv2d_backward, conv2d_forward, ConvSpec};
pub use elementwise::{channel_concat, elementwise_add, relu_backward, relu_forward};
pub use loss::masked_cross_entropy;
pub use norm::AffineNorm;
pub use optim::OptimizerState;
pub use softmax::{argmax_channels, softmax_channels};

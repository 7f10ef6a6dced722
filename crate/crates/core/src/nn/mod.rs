//! Differentiable layer set: convolution, activations, pooling, batch
//! normalization, pixel shuffle, and the Adam optimizer.

pub mod activation;
pub mod conv;
pub mod gradcheck;
pub mod norm;
pub mod optim;
pub mod pool;
pub mod shuffle;

pub use activation::{activation, activation_backward, Activation, ActivationKind};
pub use conv::{
    conv2d, conv2d_backward, conv2d_forward, conv_transpose2d_backward, conv_transpose2d_forward,
    Conv2d, ConvTranspose2d,
};
pub use norm::BatchNorm2d;
pub use optim::{adam_step, AdamConfig, Parameter};
pub use pool::MaxPool2d;
pub use shuffle::{pixel_shuffle, pixel_shuffle_batch, pixel_unshuffle, pixel_unshuffle_batch};

//! High-quality initial noise for Euler-sampled diffusion models.
//!
//! A guided inference/inversion roundtrip turns random noise into a noise
//! that already carries semantic information. Collected pairs are filtered
//! by a perceptual score and used to train a small encoder-decoder network
//! that predicts the semantic residual directly from the random noise and
//! the image prompt.

pub mod collector;
pub mod edn;
pub mod error;
pub mod format;
pub mod guidance;
pub mod nn;
pub mod quality;
pub mod scalar;
pub mod scheduler;
pub mod tensor;
pub mod testbed;
pub mod theory;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type EdnModel32 = edn::EdnModel<f32>;
pub type EdnModel64 = edn::EdnModel<f64>;
pub type ToyWorld64 = testbed::ToyWorld<f64>;

//! Shot-aware rotary attention for multi-shot video diffusion transformers.

pub mod attention;
pub mod autograd;
pub mod caption;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod optim;
pub mod rope;
pub mod scalar;
pub mod selftest;
pub mod shot_rope;
pub mod suppression;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 32-bit instantiations used by the training and sampling tools.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = autograd::Tape<f32>;
pub type Denoiser32 = model::Denoiser<f32>;
pub type Denoiser64 = model::Denoiser<f64>;
pub type TokenField32 = data::TokenField<f32>;
pub type CaptionBundle32 = caption::CaptionBundle<f32>;

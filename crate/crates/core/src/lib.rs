//! Image morphing with a toy-scale pixel-space diffusion model.
//!
//! The crate bundles a small reverse-mode autodiff engine, a UNet noise
//! predictor with LoRA attach points and attention hooks, a DDIM sampler and
//! inverter, and the morphing pipeline built on top: LoRA interpolation,
//! slerp of inverted noises, AdaIN adjustment, key/value attention injection
//! and perceptual-distance based reschedule sampling.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! production precision.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod kernels;
pub mod lora;
pub mod metrics;
pub mod morph;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use autodiff::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

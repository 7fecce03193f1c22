//! Diffusion-model laboratory: DDPM training with input perturbation and
//! Lipschitz regularizers, ancestral/deterministic/DDIM sampling with
//! respacing, and a measurement harness for exposure bias and per-step
//! prediction error on toy data.

pub mod autodiff;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod forward;
pub mod rng;
pub mod runner;
pub mod sampling;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};

//! Denoising ranking optimization for small conditional diffusion models.
//!
//! A reference ε-prediction network is pretrained on a toy conditional
//! world, expert demonstrations are selected from its own samples by a
//! synthetic reward, and a copy of it is fine-tuned with a thresholded
//! ranking loss that pushes its denoising error below the reference's on
//! expert trajectories and above it on the current policy's trajectories.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the crate root fix the precision used by the command line.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod demodata;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod numerics;
pub mod oracle;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use denoiser::{Architecture, Cond, DenoiserParams, EmaState, EpsModel};
pub use error::{DroError, Result};
pub use numerics::{Gradient, ParamSet, Seed, Tape, Tensor, Var};
pub use scalar::Scalar;
pub use schedule::{LambdaMode, NoiseSchedule, SigmaMode};

pub type Denoiser64 = DenoiserParams<f64>;
pub type Denoiser32 = DenoiserParams<f32>;
pub type Schedule64 = NoiseSchedule<f64>;
pub type Schedule32 = NoiseSchedule<f32>;

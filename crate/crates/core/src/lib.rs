//! Residual-shifting diffusion for image super-resolution.
//!
//! The forward chain moves a high-resolution image toward its degraded
//! counterpart, `x_t = x_hr + β_t·e₀ + γ√β_t·ε` with `e₀ = x_lr − x_hr`, and
//! a trained denoiser walks it back in a handful of steps. The crate holds
//! the schedule, forward and posterior kernels, the K-step sampler, a small
//! U-shaped denoiser with optional windowed attention and its own
//! reverse-mode autodiff, the training loop, a synthetic data pipeline,
//! quality metrics with rank statistics, and the file formats used by the
//! `rsrdiff` command-line tool.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); aliases below
//! name the concrete instantiations.

pub mod checkpoint;
pub mod config;
pub mod degradation;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod report;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod scheduler;
pub mod tensor;
pub mod threads;
pub mod trainer;

pub use diffusion::{
    forward_marginal, forward_step, marginal_params, posterior_params, reverse_step,
    GaussianParams, ImagePair,
};
pub use error::{Error, Result};
pub use nn::{NetConfig, ParamSet, Variant};
pub use sampler::{oracle_denoiser, run_sampler, Denoiser, SamplerConfig};
pub use scalar::{DType, Scalar};
pub use scheduler::{build_schedule, sub_schedule, Schedule, ScheduleConfig, SubSchedule};
pub use tensor::TensorImage;
pub use trainer::TrainConfig;

pub type Image32 = TensorImage<f32>;
pub type Image64 = TensorImage<f64>;
pub type Pair32 = ImagePair<f32>;
pub type Pair64 = ImagePair<f64>;
pub type Params32 = ParamSet<f32>;
pub type Params64 = ParamSet<f64>;
pub type Gaussian64 = GaussianParams<f64>;

//! Multi-class semantic segmentation by recursive noise diffusion.
//!
//! A segmentation map is treated as a continuous `classes x H x W` tensor.
//! Training walks every noise level from `T` down to `1` for each sample,
//! feeding each step's denoised estimate into the next step, optionally over
//! a ladder of resolutions per step. Inference repeats the same walk from
//! pure noise and takes the per-pixel argmax.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use denoiser::{DenoiserConfig, DenoiserNetwork};
pub use diffusion::NoiseSchedule;
pub use error::{Error, Result};
pub use tensor::{Image, NoiseTensor, Real, SegMap, Tensor};


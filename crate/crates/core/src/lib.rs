pub mod acceptance;
pub mod costmodel;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod format;
pub mod metrics;
pub mod mzlab;
pub mod rollout;
pub mod se3;
pub mod synth;
pub mod tape;
pub mod training;

pub use error::{Error, Result};

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("residue count mismatch: {0} vs {1}")]
    ResidueMismatch(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("diffusion time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("sigma {sigma} outside tabulated range [{min}, {max}]")]
    SigmaOutOfRange { sigma: f64, min: f64, max: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("attention row {0} has no permitted keys")]
    EmptyAttentionRow(usize),

    #[error("near-singular resolvent at p = {p}: condition number {condition:.3e}")]
    SingularResolvent { p: String, condition: f64 },

    #[error("simulation unstable: |state| = {norm:.3e} at t = {time}")]
    Unstable { norm: f64, time: f64 },

    #[error("training diverged at step {step}: loss {loss:.3e}")]
    Diverged { step: usize, loss: f64 },

    #[error("malformed trajectory file: {0}")]
    Format(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("inertia matrix is ill-conditioned (condition number {cond:e})")]
    IllConditioned { cond: f64 },

    #[error("eigen decomposition failed: {0}")]
    Eigen(String),

    #[error("simulation diverged at step {step} (t = {t} s): {reason}")]
    Divergence { step: usize, t: f64, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("kernel singularity at x = {0}")]
    Singularity(f64),

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("circulant embedding has negative eigenvalue {value} at index {index}")]
    EmbeddingNegative { index: usize, value: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("volatility must be nonzero and single-signed: {0}")]
    SigmaSign(String),

    #[error("negative smoothing variance {0}")]
    NegativeVariance(f64),

    #[error("time {t} outside [0, {t_end}]")]
    OutOfRange { t: f64, t_end: f64 },

    #[error("hurst mismatch: batch has {batch}, model has {model}")]
    HurstMismatch { batch: f64, model: f64 },

    #[error("implicit solve diverged: {0}")]
    Divergence(String),

    #[error("boundary extrapolation overflow at t = {0}; space domain too small")]
    BoundaryOverflow(f64),

    #[error("unknown test function `{0}`")]
    UnknownFunction(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

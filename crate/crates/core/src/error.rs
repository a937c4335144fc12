use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GlrError>;

#[derive(Debug, Error)]
pub enum GlrError {
    /// Incompatible tensor extents or layer configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violates a numeric precondition (e.g. non-finite values).
    #[error("data error: {0}")]
    Data(String),

    /// Image or patch dimensions that the pipeline cannot process.
    #[error("sizing error: {0}")]
    Sizing(String),

    /// The API was driven in an invalid order.
    #[error("usage error: {0}")]
    Usage(String),

    /// Conjugate gradients hit the iteration cap before reaching tolerance.
    #[error(
        "solver failed to converge after {iterations} iterations (relative residual {residual:e})"
    )]
    SolverFailure { iterations: usize, residual: f64 },

    /// A forward cache whose stored solution no longer satisfies the system.
    #[error("stale solver cache: relative residual {residual:e} exceeds tolerance {tolerance:e}")]
    StaleCache { residual: f64, tolerance: f64 },

    /// Graph with no edge weight at all (maximum degree zero).
    #[error("degenerate graph: maximum vertex degree is zero")]
    DegenerateGraph,

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {snapshot}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        snapshot: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GlrError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GlrError::Io {
            path: path.into(),
            source,
        }
    }
}

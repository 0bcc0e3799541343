use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    /// A node produced NaN or an infinity.
    #[error("non-finite value produced by node {node} ({op})")]
    NumericDomain { node: usize, op: &'static str },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("rollout {rollout} of task {task} failed: {message}")]
    Rollout {
        task: usize,
        rollout: usize,
        message: String,
    },

    /// Meta-training diverged. `detail` carries the parameter norms at the
    /// time of the abort.
    #[error("meta-training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(
    context: &'static str,
    expected: impl std::fmt::Debug,
    got: impl std::fmt::Debug,
) -> Error {
    Error::ShapeMismatch {
        context,
        expected: format!("{expected:?}"),
        got: format!("{got:?}"),
    }
}

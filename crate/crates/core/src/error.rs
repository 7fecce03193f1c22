use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {msg}")]
    InvalidShape { shape: Vec<usize>, msg: String },

    #[error("sqrt of negative entry {0}")]
    NegativeSqrt(f64),

    #[error("autodiff: {0}")]
    Autodiff(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("step {t} out of range 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("numeric degeneracy: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("jacobian output dimension {dim} exceeds the exactness budget {budget}; enable the probe estimator")]
    JacobianBudget { dim: usize, budget: usize },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

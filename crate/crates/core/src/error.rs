use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum DregError {
    #[error("shape mismatch: {context}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("singular affine matrix: det(M'M) = {det:.3e} below {min:.0e}")]
    SingularAffine { det: f64, min: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },

    #[error("unsupported container version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: String,
        expected: u32,
        found: u32,
    },

    #[error("truncated container {path}: need {needed} bytes, file has {available}")]
    Truncated {
        path: String,
        needed: u64,
        available: u64,
    },

    #[error("checkpoint does not match model config: {0}")]
    CheckpointMismatch(String),

    #[error("empty mask passed to {0}")]
    EmptyMask(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, DregError>;

impl DregError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DregError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {got}")]
    Dimension {
        axis: String,
        expected: usize,
        got: usize,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("quaternion has zero norm")]
    ZeroQuaternion,

    #[error("mesh grid needs n >= 1")]
    EmptyGrid,

    #[error("vertices with zero accumulated normal: {0:?}")]
    DegenerateNormals(Vec<usize>),

    #[error("degenerate point set: {0}")]
    Degenerate(String),

    #[error("illumination system is rank deficient (condition number {condition:.3e})")]
    RankDeficient { condition: f64 },

    #[error("normal is not unit length (norm {norm})")]
    NonUnitNormal { norm: f64 },

    #[error("non-finite gradient in term `{term}`")]
    NonFiniteGradient { term: String },

    #[error("index {index} out of range for {len} vertices")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(axis: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            axis: axis.into(),
            expected,
            got,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}

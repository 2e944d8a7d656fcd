use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("unknown reach direction {0} deg")]
    UnknownDirection(f64),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("weight file: {0}")]
    Weights(String),

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("undefined R² (zero target variance in component {0})")]
    UndefinedRSquared(usize),

    #[error("inverse kinematics did not converge (residual {residual:.4} mm)")]
    IkNoConvergence { angles: Vec<f64>, residual: f64 },

    #[error("bin {bin}: {source}")]
    AtBin {
        bin: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn at_bin(self, bin: usize) -> Self {
        Error::AtBin {
            bin,
            source: Box::new(self),
        }
    }
}

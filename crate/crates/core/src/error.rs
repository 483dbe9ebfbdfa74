use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: point {index} at ({x}, {y}) outside [0, {w_max}] x [0, {h_max}]")]
    PointOutOfRange {
        op: &'static str,
        index: usize,
        x: f64,
        y: f64,
        w_max: f64,
        h_max: f64,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid label {label} at pixel {index} (num_classes = {num_classes})")]
    InvalidLabel {
        label: usize,
        index: usize,
        num_classes: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at byte offset {offset}: {detail}")]
    Parse {
        path: String,
        offset: usize,
        detail: String,
    },

    #[error("training diverged at iteration {iter}: {detail}")]
    Diverged { iter: usize, detail: String },

    #[error("verification check `{check}` failed: {detail}")]
    CheckFailed { check: String, detail: String },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

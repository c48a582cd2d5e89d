use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("loss node {node} is not a scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },

    #[error("NaN in gradient produced by node {node} ({op})")]
    NanGradient { node: usize, op: &'static str },

    #[error("node {0} is not a leaf")]
    NotALeaf(usize),

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("non-invertible perspective transform: denominator {denominator:e} at ({x}, {y})")]
    DegenerateTransform { denominator: f64, x: f64, y: f64 },

    #[error("{kind} transform expects {expected} parameters, got {got}")]
    ParamCount {
        kind: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("downsample factor must be >= 1, got {0}")]
    BadFactor(usize),

    #[error("image shapes differ: {a:?} vs {b:?}")]
    ImageShape { a: (usize, usize), b: (usize, usize) },

    #[error("frame {frame}: jitter too large, {fraction:.1}% of samples out of bounds")]
    JitterTooLarge { frame: usize, fraction: f64 },

    #[error("registration of frame {frame} failed: {source}")]
    Registration {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("output shape {height}x{width} is not divisible by 2^{layers}; pad to {pad_height}x{pad_width}")]
    DecoderShape {
        height: usize,
        width: usize,
        layers: usize,
        pad_height: usize,
        pad_width: usize,
    },

    #[error("underdetermined: L*N < 3N + P(L-1) with L = {frames}")]
    Underdetermined { frames: usize },

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error("solver diverged at iteration {iteration}: data loss {loss:e} exceeded 10x initial {initial:e}")]
    Diverged {
        iteration: usize,
        loss: f64,
        initial: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty frame stack")]
    EmptyStack,

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

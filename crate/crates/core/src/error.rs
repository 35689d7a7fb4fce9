use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A vector that must be normalized (or a prototype mean) has norm below 1e-12.
    #[error("degenerate vector in {0}: norm below 1e-12")]
    DegenerateVector(&'static str),

    #[error("backward already ran on this graph; call zero_grads before running it again")]
    DoubleBackward,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("degenerate batch: no anchor has a positive pair")]
    DegenerateBatch,

    #[error("undefined compactness ratio: {0}")]
    UndefinedRatio(String),

    #[error("non-finite loss at step {step} (lr={lr:e}, tau={tau}, lambda={lambda})")]
    NonFiniteLoss {
        step: usize,
        lr: f64,
        tau: f64,
        lambda: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

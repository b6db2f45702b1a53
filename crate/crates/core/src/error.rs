use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: dimension mismatch, lhs {lhs:?} vs rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range [0, {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value in {what}: {detail}")]
    NonFinite { what: String, detail: String },

    /// A documented precondition of the callee was not met by the caller.
    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(
        "sampling criterion violated: pitch {pitch:.3e} m is too fine for distance {distance:.3e} m \
         (band limit keeps {kept:.2} of the Nyquist band); required pitch >= {required_pitch:.3e} m"
    )]
    Sampling {
        pitch: f64,
        distance: f64,
        kept: f64,
        required_pitch: f64,
    },

    #[error("phase retrieval diverged at iteration {iteration} (loss {loss:.3e})")]
    Divergence {
        iteration: usize,
        loss: f64,
        history: Vec<f64>,
    },

    #[error("training produced a non-finite loss at epoch {epoch}; last good checkpoint: {checkpoint:?}")]
    TrainingDiverged {
        epoch: usize,
        checkpoint: Option<PathBuf>,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported operation for {0}")]
    Unsupported(String),

    #[error("stale compiled layout: kernel hash {stored:#018x} does not match parameters {actual:#018x}")]
    StaleLayout { stored: u64, actual: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("variable `{name}` at line {line}, column {column} is out of range for dimension {dimension}")]
    IndexOutOfRange {
        name: String,
        dimension: usize,
        line: usize,
        column: usize,
    },

    #[error("unknown identifier `{name}` at line {line}, column {column}")]
    UnknownIdentifier { name: String, line: usize, column: usize },

    #[error("domain error in `{subtree}`: {reason}")]
    Domain { subtree: String, reason: String },

    #[error("parameter `{0}` is not bound")]
    UnboundParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("derivative request out of bounds: {0}")]
    OrderBounds(String),

    #[error("invalid coordinate change: {0}")]
    CoordinateChange(String),

    #[error("singular Jacobian at x = {at:?} (|det| = {det:e})")]
    SingularJacobian { at: Vec<f64>, det: f64 },

    #[error("not a Finsler point: {0}")]
    Degenerate(String),

    #[error("invalid chart point: {0}")]
    InvalidPoint(String),

    #[error("unknown builtin metric `{0}`")]
    UnknownBuiltin(String),

    #[error("site sampling gave up after {attempts} draws for one site; most violated constraint: {constraint}")]
    SamplingExhausted { attempts: usize, constraint: String },

    #[error("metric file line {line}: {message}")]
    MetricFile { line: usize, message: String },

    #[error("spherical closed form undefined: {0}")]
    Spherical(String),
}

impl Error {
    pub(crate) fn domain(subtree: impl ToString, reason: impl Into<String>) -> Self {
        Error::Domain {
            subtree: subtree.to_string(),
            reason: reason.into(),
        }
    }
}

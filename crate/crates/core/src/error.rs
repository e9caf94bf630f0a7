use std::fmt;
use std::io;

/// Errors produced by the quantization engine.
#[derive(Debug)]
pub enum Error {
    Io(io::Error),
    /// Two operands disagree on a dimension.
    Shape(String),
    /// A value that must be finite was NaN or infinite.
    NonFinite(String),
    /// Caller-supplied argument outside its documented domain.
    InvalidArgument(String),
    /// The requested average bit cannot be met inside `[b_min, b_max]`.
    InfeasibleBudget { bit: f64, b_min: u8, b_max: u8 },
    /// A desk-scale routine was asked to run beyond its size guard.
    ScaleGuard { what: &'static str, size: usize, limit: usize },
    /// A quadratic form came out meaningfully negative.
    NotPsd(f64),
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    UnsupportedVersion(u16),
    Truncated(String),
    /// Structurally malformed container or blob.
    Format(String),
    Checksum { stored: u32, computed: u32 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::InfeasibleBudget { bit, b_min, b_max } => write!(
                f,
                "infeasible bit budget: average bit {bit} must lie in [b_min={b_min}, b_max={b_max}]"
            ),
            Error::ScaleGuard { what, size, limit } => {
                write!(f, "{what} is desk-scale only: size {size} exceeds limit {limit}")
            }
            Error::NotPsd(v) => write!(f, "quadratic form is negative ({v:e}); weighting is not PSD"),
            Error::BadMagic { expected, found } => write!(
                f,
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(found)
            ),
            Error::UnsupportedVersion(v) => write!(f, "unsupported format version {v}"),
            Error::Truncated(msg) => write!(f, "truncated input: {msg}"),
            Error::Format(msg) => write!(f, "malformed data: {msg}"),
            Error::Checksum { stored, computed } => write!(
                f,
                "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            ),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(format!("json: {e}"))
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

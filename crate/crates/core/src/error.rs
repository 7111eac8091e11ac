use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the coordination layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not compose.
    Shape {
        op: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },
    /// A value that must be finite was NaN or infinite.
    NonFinite(&'static str),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// An input violates the operation's precondition.
    Input(String),
    /// Operation called before required state was initialized.
    State(&'static str),
    /// Demand cannot be satisfied even after evicting every candidate.
    Capacity { needed: usize, available: usize },
    /// A rollback would rewind more than the commit horizon.
    HorizonExceeded { span: usize, horizon: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, expected, found } => write!(
                f,
                "{op}: shape mismatch (expected {}x{}, found {}x{})",
                expected.0, expected.1, found.0, found.1
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Input(msg) => write!(f, "invalid input: {msg}"),
            Error::State(msg) => write!(f, "invalid state: {msg}"),
            Error::Capacity { needed, available } => write!(
                f,
                "capacity exceeded: need {needed} resident pages, at most {available} available"
            ),
            Error::HorizonExceeded { span, horizon } => {
                write!(f, "uncommitted span {span} exceeds commit horizon {horizon}")
            }
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}

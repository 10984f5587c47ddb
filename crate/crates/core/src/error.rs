//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by any module in this crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible; names both shapes.
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Input is mathematically degenerate (e.g. zero-norm vector for cosine).
    DegenerateInput { op: &'static str, detail: String },
    /// Index (label, token id, layer) out of range.
    Index {
        what: &'static str,
        got: usize,
        bound: usize,
    },
    /// Invalid configuration or contract violation at call time.
    Config(String),
    /// Sequence capacity exceeded.
    Capacity { needed: usize, max: usize },
    /// A graph-level contract was violated (e.g. non-scalar output).
    Contract(String),
    /// Training diverged or otherwise failed.
    Training { step: usize, detail: String },
    /// Synthetic data generation could not satisfy its constraints.
    Generation(String),
    /// The upgrade zero-shot gate could not be met within the retry budget.
    UpgradeGate {
        base_mean: f64,
        upgraded_mean: f64,
        attempts: usize,
    },
    /// Underlying I/O failure.
    Io(String),
    /// Malformed serialized data.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::DegenerateInput { op, detail } => write!(f, "{op}: degenerate input: {detail}"),
            Error::Index { what, got, bound } => {
                write!(f, "{what} index {got} out of range (bound {bound})")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Capacity { needed, max } => {
                write!(f, "sequence capacity exceeded: need {needed}, max {max}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Training { step, detail } => write!(f, "training failed at step {step}: {detail}"),
            Error::Generation(msg) => write!(f, "generation error: {msg}"),
            Error::UpgradeGate {
                base_mean,
                upgraded_mean,
                attempts,
            } => write!(
                f,
                "upgrade gate not met after {attempts} attempts: base zero-shot {base_mean:.2} vs upgraded {upgraded_mean:.2}"
            ),
            Error::Io(msg) => write!(f, "io error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

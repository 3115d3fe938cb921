//! Error taxonomy shared by every module.

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

/// A single violated configuration invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigViolation {
    /// The window length is not a multiple of the product of the downsampling ratios.
    Divisibility { window_samples: usize, product: usize },
    /// A real-valued field lies outside its admissible range.
    Range { field: &'static str, value: f64, expected: &'static str },
    /// A structural mismatch, e.g. channel list length versus ratio count.
    Structure { message: String },
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigViolation::Divisibility { window_samples, product } => write!(
                f,
                "window of {window_samples} samples is not divisible by downsampling product {product}"
            ),
            ConfigViolation::Range { field, value, expected } => {
                write!(f, "{field} = {value} is out of range (expected {expected})")
            }
            ConfigViolation::Structure { message } => f.write_str(message),
        }
    }
}

fn join_violations(v: &[ConfigViolation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", join_violations(.0))]
    InvalidConfig(Vec<ConfigViolation>),

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("cutoff {cutoff_hz} Hz must lie strictly inside (0, {nyquist_hz}) Hz")]
    Cutoff { cutoff_hz: f64, nyquist_hz: f64 },

    #[error("signal of {samples} samples is too short for a {taps}-tap filter")]
    Length { samples: usize, taps: usize },

    #[error("sample rate {from_hz} Hz is not an integer multiple of {to_hz} Hz")]
    Factor { from_hz: f64, to_hz: f64 },

    #[error("degenerate channel statistics (MAD = 0); deviant channels: {bad:?}")]
    Degenerate { bad: Vec<usize> },

    #[error("no good sensors available for interpolation")]
    NoGoodSensors,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("dataset `{0}` is already registered")]
    Duplicate(String),

    #[error("dataset `{0}` has no registered input projection")]
    UnknownDataset(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {actual:08x}")]
    Checksum { expected: u32, actual: u32 },

    #[error("event schedule overlaps: {0}")]
    Overlap(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("held-out subject `{0}` appears in training windows")]
    Leakage(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("preprocessing stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Strips any `Stage` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

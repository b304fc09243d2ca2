use std::fmt;

/// Errors surfaced by user-facing operations (data loading, config parsing,
/// clip preprocessing, training). Tensor shape violations are programmer
/// errors and panic instead.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A source video is shorter than the sampling pattern requires.
    VideoTooShort { required: usize, available: usize },
    /// Frame geometry is not divisible into whole patches.
    PatchDivisibility { height: usize, width: usize, patch: usize },
    /// A class index is outside `[0, num_classes)`.
    InvalidClass { class: usize, num_classes: usize },
    /// Source and target clips of a pair carry different labels.
    LabelMismatch { source: usize, target: usize },
    /// A domain-shift or loss parameter is outside its valid range.
    InvalidParameter { name: &'static str, value: f64, constraint: &'static str },
    /// A configuration key is unknown or its value failed to parse.
    Config(String),
    /// An evaluation was requested on an empty clip set.
    EmptySplit,
    /// A loss became non-finite during training.
    NonFiniteLoss { step: usize, detail: String },
    /// Underlying I/O failure, with the path involved.
    Io(String),
    /// A binary file did not match its documented format.
    Format(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::VideoTooShort { required, available } => write!(
                f,
                "video too short: sampling requires {required} frames, only {available} available"
            ),
            Error::PatchDivisibility { height, width, patch } => write!(
                f,
                "frame {height}x{width} not divisible into {patch}x{patch} patches"
            ),
            Error::InvalidClass { class, num_classes } => {
                write!(f, "class {class} out of range (num_classes = {num_classes})")
            }
            Error::LabelMismatch { source, target } => {
                write!(f, "pair labels differ: source {source} vs target {target}")
            }
            Error::InvalidParameter { name, value, constraint } => {
                write!(f, "parameter {name} = {value} violates {constraint}")
            }
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::EmptySplit => write!(f, "cannot evaluate an empty clip set"),
            Error::NonFiniteLoss { step, detail } => {
                write!(f, "non-finite loss at step {step}: {detail}")
            }
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
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

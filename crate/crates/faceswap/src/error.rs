use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, model construction, and the training harness.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Two tensors fed to a binary op have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A single tensor has a shape the op cannot accept.
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        expected: String,
    },
    /// Constructor received data whose length does not match the shape.
    DataLength { expected: usize, got: usize },
    /// An op that requires a non-degenerate input (e.g. nonzero vector) got one.
    DegenerateInput { op: &'static str, detail: String },
    /// backward() was called on a tensor that is not a scalar.
    NonScalarRoot { shape: Vec<usize> },
    /// A gradient contained NaN/Inf when the optimizer tried to apply it.
    NonFiniteGradient { param: String },
    /// A loss value became NaN/Inf during training.
    NonFiniteLoss { term: String, step: usize },
    /// Model or schedule configuration violates an invariant.
    InvalidConfig { what: String },
    /// Config file parsing failed (unknown key, bad value, bad syntax).
    Config { line: usize, what: String },
    /// Embedder pretraining did not reach the required identity separation.
    PretrainingFailed { separation: f64, required: f64 },
    /// Checkpoint bytes are malformed or of an unsupported version.
    Checkpoint { what: String },
    /// Image file is malformed or has unexpected dimensions.
    Image { what: String },
    /// Wrapper around I/O failures.
    Io { path: String, what: String },
    /// A metric was asked to operate on an empty or too-small input set.
    EmptyInput { op: &'static str },
    /// Schedule evaluated outside its valid step range.
    StepOutOfRange { t: usize, t_total: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::BadShape {
                op,
                shape,
                expected,
            } => {
                write!(f, "{op}: bad shape {shape:?}, expected {expected}")
            }
            Error::DataLength { expected, got } => {
                write!(
                    f,
                    "data length {got} does not match shape product {expected}"
                )
            }
            Error::DegenerateInput { op, detail } => write!(f, "{op}: degenerate input: {detail}"),
            Error::NonScalarRoot { shape } => {
                write!(f, "backward: root must be a scalar, got shape {shape:?}")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient for parameter `{param}`")
            }
            Error::NonFiniteLoss { term, step } => {
                write!(f, "non-finite loss term `{term}` at step {step}")
            }
            Error::InvalidConfig { what } => write!(f, "invalid configuration: {what}"),
            Error::Config { line, what } => write!(f, "config line {line}: {what}"),
            Error::PretrainingFailed {
                separation,
                required,
            } => write!(
                f,
                "embedder pretraining reached separation {separation:.4}, required {required}"
            ),
            Error::Checkpoint { what } => write!(f, "checkpoint: {what}"),
            Error::Image { what } => write!(f, "image: {what}"),
            Error::Io { path, what } => write!(f, "io error on `{path}`: {what}"),
            Error::EmptyInput { op } => write!(f, "{op}: empty input set"),
            Error::StepOutOfRange { t, t_total } => {
                write!(f, "step {t} outside schedule range 0..={t_total}")
            }
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    pub fn io(path: &std::path::Path, e: std::io::Error) -> Error {
        Error::Io {
            path: path.display().to_string(),
            what: e.to_string(),
        }
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on {axis} axis: expected {expected}, got {actual}")]
    ShapeMismatch {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("mask is not binary: found value {value}")]
    NonBinaryMask { value: f64 },

    #[error("{dim} size {size} is not divisible by stride {stride}")]
    NotDivisible {
        dim: &'static str,
        size: usize,
        stride: usize,
    },

    #[error("diffusion step {t} outside valid range [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("invalid parameter {name}: {message}")]
    InvalidParam { name: &'static str, message: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },

    #[error("input {input_h}x{input_w} exceeds canvas {canvas_h}x{canvas_w}")]
    InputExceedsCanvas {
        input_h: usize,
        input_w: usize,
        canvas_h: usize,
        canvas_w: usize,
    },

    #[error("frame is entirely masked; boundary fill needs at least one known pixel")]
    AllMasked,

    #[error("frame {h}x{w} too small: minimum supported size is {min}x{min}")]
    FrameTooSmall { h: usize, w: usize, min: usize },

    #[error("crop result too narrow: {kept} columns left, minimum is {min}")]
    TooNarrow { kept: usize, min: usize },

    #[error("aspect ratio {aspect_w}:{aspect_h} impossible on a {canvas_h}x{canvas_w} canvas")]
    AspectImpossible {
        aspect_w: u32,
        aspect_h: u32,
        canvas_h: usize,
        canvas_w: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("invalid value for config key `{key}`: {message}")]
    BadValue { key: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class: 2 for usage/config problems, 1 for runtime
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_)
            | Error::ConfigParse { .. }
            | Error::MissingKey(_)
            | Error::BadValue { .. }
            | Error::InvalidParam { .. } => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        }
    }
}

use thiserror::Error;

/// Error type shared by every module in the crate.
///
/// Variants carry enough context (operation name, offending shapes, file
/// positions) that a caller can print them and know what went wrong without
/// digging through a backtrace.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors (or a tensor and an expected shape) disagree.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An argument violated a documented precondition.
    #[error("invalid argument for {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    /// A network layer cannot be built for the given input extent.
    #[error("layer {layer} cannot process input of shape {shape:?}: {reason}")]
    LayerShape {
        layer: String,
        shape: Vec<usize>,
        reason: String,
    },

    /// Malformed input data (bar files, frames, configs).
    #[error("data error in {source_name}{}: {reason}", fmt_row(*.row))]
    Data {
        source_name: String,
        row: Option<usize>,
        reason: String,
    },

    /// Configuration document problems (unknown key, bad value, missing key).
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint serialization problems.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_row(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(" (row {r})"),
        None => String::new(),
    }
}

impl Error {
    pub fn data(source_name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Data {
            source_name: source_name.into(),
            row: None,
            reason: reason.into(),
        }
    }

    pub fn data_row(
        source_name: impl Into<String>,
        row: usize,
        reason: impl Into<String>,
    ) -> Self {
        Error::Data {
            source_name: source_name.into(),
            row: Some(row),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable category, used by the CLI exit path.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::LayerShape { .. } => "shape",
            Error::NonFinite { .. } => "numeric",
            Error::InvalidArgument { .. } => "argument",
            Error::Data { .. } => "data",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

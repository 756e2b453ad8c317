//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, PiwError>;

/// Errors emitted by the runtime, trainers, and file-format codecs.
#[derive(Debug, Error)]
pub enum PiwError {
    /// Two operands (or an operand and a declared contract) disagree on shape.
    #[error("shape mismatch in {context}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    Shape {
        context: String,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// An index (token id, target class, row) fell outside its bound.
    #[error("index out of range in {context}: {index} >= {bound}")]
    Index {
        context: String,
        index: usize,
        bound: usize,
    },

    /// A numeric guard tripped (non-finite loss or gradient).
    #[error("non-finite value in {context}")]
    Numeric { context: String },

    /// A configuration field has an invalid value.
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    /// Bad input to an operation (empty dataset, too-short waveform, ...).
    #[error("invalid input: {message}")]
    Input { message: String },

    /// A file is syntactically readable but uses an unsupported encoding.
    #[error("unsupported format ({field}): {message}")]
    UnsupportedFormat { field: String, message: String },

    /// Magic, version, or schema of a file does not match the expected format.
    #[error("format error: {message}")]
    Format { message: String },

    /// A file matched the format but its contents are internally inconsistent.
    #[error("corrupt file: {message}")]
    Corrupt { message: String },

    /// An id that must be unique already exists.
    #[error("conflict: {message}")]
    Conflict { message: String },

    /// A lookup key (layer id, characteristic value) was not found.
    #[error("lookup failed: {message}")]
    Lookup { message: String },

    /// Profiles with incompatible layer sets were handed to a merge.
    #[error("merge error: {message}")]
    Merge { message: String },

    /// A taxonomy violates its uniqueness invariants.
    #[error("taxonomy error: {message}")]
    Taxonomy { message: String },

    /// A manifest references a file that does not exist.
    #[error("missing file: {path}")]
    MissingFile { path: String },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PiwError {
    pub fn shape(context: impl Into<String>, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        PiwError::Shape {
            context: context.into(),
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        PiwError::Input {
            message: message.into(),
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        PiwError::Format {
            message: message.into(),
        }
    }

    pub fn corrupt(message: impl Into<String>) -> Self {
        PiwError::Corrupt {
            message: message.into(),
        }
    }

    pub fn conflict(message: impl Into<String>) -> Self {
        PiwError::Conflict {
            message: message.into(),
        }
    }

    pub fn lookup(message: impl Into<String>) -> Self {
        PiwError::Lookup {
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        PiwError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

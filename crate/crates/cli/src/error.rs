use std::path::{Path, PathBuf};

use crate::format::Dtype;

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected a P4D1 JSON header, found {found:?}")]
    BadMagic { found: String },
    #[error("malformed header near byte {offset}: {message}")]
    Header { offset: usize, message: String },
    #[error("dims {dims:?} overflow the addressable payload size")]
    DimOverflow { dims: [usize; 4] },
    #[error("payload at byte {offset} has {actual} bytes, expected {expected}")]
    PayloadLength { offset: usize, expected: usize, actual: usize },
    #[error("dtype {found:?} where {expected:?} was expected")]
    Dtype { expected: Dtype, found: Dtype },
    #[error("non-finite sample at byte {offset}")]
    NonFinite { offset: usize },
    #[error("mask byte {offset} holds {value}, expected 0 or 1")]
    MaskValue { offset: usize, value: u8 },
    #[error("line {line}: {message}")]
    Table { line: u64, message: String },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}{source}", path_prefix(.path))]
    Format { path: Option<PathBuf>, source: FormatError },
    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: invalid JSON: {source}", .path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error(transparent)]
    Core(#[from] aifopt_core::Error),
    #[error("gradient check failed: max relative error {error:e} exceeds {tolerance:e}")]
    GradCheck { error: f64, tolerance: f64 },
}

fn path_prefix(path: &Option<PathBuf>) -> String {
    path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default()
}

impl From<FormatError> for CliError {
    fn from(source: FormatError) -> Self {
        CliError::Format { path: None, source }
    }
}

impl CliError {
    /// Attaches a file name to format errors that lack one.
    pub fn at(self, p: &Path) -> Self {
        match self {
            CliError::Format { path: None, source } => CliError::Format {
                path: Some(p.to_owned()),
                source,
            },
            other => other,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Format { .. } | CliError::Io { .. } | CliError::Json { .. } => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(_) => 2,
            CliError::GradCheck { .. } => 4,
        }
    }
}

use thiserror::Error;

/// Unified error type for the whole crate.
///
/// The variants map onto the process exit codes used by the CLI:
/// `Config`/`Annotation` are caller mistakes, `Format`/`Data` mean the inputs
/// on disk are unusable, and `Numerical` flags a diverged optimisation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs_rows}x{lhs_cols} vs {rhs_rows}x{rhs_cols}")]
    Shape {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid annotation: {0}")]
    Annotation(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("inconsistent data: {0}")]
    Data(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

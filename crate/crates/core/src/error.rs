use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum GcnError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("schema error: {0}")]
    Schema(String),

    /// A caller broke an operation contract (e.g. backward from a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate blend: identity {0} blended with itself")]
    DegenerateBlend(usize),

    #[error("training diverged at batch {batch}: {detail}")]
    Divergence { batch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("{}: {source}", path.display())]
    File {
        path: std::path::PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GcnError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GcnError::File {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GcnError::Shape(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        GcnError::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T, E = GcnError> = std::result::Result<T, E>;

use std::io;
use std::path::{Path, PathBuf};

/// Errors from file formats, dataset layout, configuration and the
/// training driver.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: malformed NPY file: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: unsupported array shape: {reason}")]
    Shape { path: PathBuf, reason: String },
    #[error("{path}: unsupported element type {descr}")]
    DType { path: PathBuf, descr: String },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}: duplicate case id {case_id}")]
    Integrity { path: PathBuf, case_id: String },
    #[error("dataset layout: {0}")]
    Layout(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("grid search: {0}")]
    Search(String),
    #[error(transparent)]
    Core(#[from] kneemri_core::Error),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

impl PipelineError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        PipelineError::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Attaches a path to IO failures.
pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|e| PipelineError::io(path, e))
    }
}

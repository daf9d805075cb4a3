use std::path::PathBuf;

use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Io { .. } => EXIT_IO,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<mmpack::ingest::IngestError> for CliError {
    fn from(e: mmpack::ingest::IngestError) -> Self {
        use mmpack::ingest::IngestError;
        match e {
            IngestError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<mmpack::curation::CurationError> for CliError {
    fn from(e: mmpack::curation::CurationError) -> Self {
        use mmpack::curation::CurationError;
        match e {
            CurationError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<mmpack::packstore::PackstoreError> for CliError {
    fn from(e: mmpack::packstore::PackstoreError) -> Self {
        use mmpack::packstore::PackstoreError;
        match e {
            PackstoreError::Io { path, source } => CliError::Io { path, source },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<mmpack::packer::PackError> for CliError {
    fn from(e: mmpack::packer::PackError) -> Self {
        CliError::Data(e.to_string())
    }
}

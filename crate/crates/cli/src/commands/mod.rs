//! Subcommand implementations. Each returns a summary whose `Display` is the
//! human-readable output and whose `exit_code` reflects partial failures.

pub mod budget;
pub mod filter;
pub mod pack;
pub mod reshard;
pub mod stats;
pub mod verify;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{CliError, EXIT_DATA, EXIT_IO, EXIT_OK};

/// Paths matching `pattern`, sorted.
pub fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>, CliError> {
    let paths =
        glob::glob(pattern).map_err(|e| CliError::Usage(format!("bad glob {pattern:?}: {e}")))?;
    let mut out = Vec::new();
    for entry in paths {
        let path = entry.map_err(|e| {
            let path = e.path().to_owned();
            CliError::io(path, e.into())
        })?;
        if path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Runs `write` against a sibling temp path and renames it into place only on
/// success, so a failed step never leaves a partial file at `dest`.
pub fn write_atomically<E>(dest: &Path, write: impl FnOnce(&Path) -> Result<(), E>) -> Result<(), E>
where
    E: From<CliError>,
{
    let mut tmp = dest.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    match write(&tmp) {
        Ok(()) => fs::rename(&tmp, dest).map_err(|e| {
            let _ = fs::remove_file(&tmp);
            E::from(CliError::io(dest, e))
        }),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Newline-delimited JSON, one flat object per line.
pub fn write_report(path: &Path, rows: &[Value]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_atomically(path, |tmp| {
        let file = File::create(tmp).map_err(|e| CliError::io(tmp, e))?;
        let mut out = BufWriter::new(file);
        for row in rows {
            writeln!(out, "{row}").map_err(|e| CliError::io(tmp, e))?;
        }
        out.flush().map_err(|e| CliError::io(tmp, e))
    })
}

/// A per-item failure that did not stop the run.
#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub path: PathBuf,
    pub message: String,
    pub exit_code: i32,
}

impl Failure {
    pub fn new(path: &Path, err: &CliError) -> Self {
        Failure {
            path: path.to_owned(),
            message: err.to_string(),
            exit_code: err.exit_code(),
        }
    }
}

/// Exit status for a run with these failures: I/O wins over data errors.
pub fn exit_code_for(failures: &[Failure]) -> i32 {
    if failures.iter().any(|f| f.exit_code == EXIT_IO) {
        EXIT_IO
    } else if failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_DATA
    }
}

pub(crate) fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

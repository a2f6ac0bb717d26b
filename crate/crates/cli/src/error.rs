use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    /// A problem with one input file; `line` is 1-based.
    #[error("{}", ingest_message(.file, *.line, .column.as_deref(), .message))]
    Ingest {
        file: PathBuf,
        line: Option<u64>,
        column: Option<String>,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] driftlab_core::Error),

    #[error("{failed} of {total} validation checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

fn ingest_message(file: &std::path::Path, line: Option<u64>, column: Option<&str>, message: &str) -> String {
    let mut s = file.display().to_string();
    if let Some(l) = line {
        s.push_str(&format!(":{l}"));
    }
    if let Some(c) = column {
        s.push_str(&format!(": column `{c}`"));
    }
    format!("{s}: {message}")
}

impl CliError {
    /// 2 for failed checks, 1 for everything the user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed { .. } => 2,
            _ => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub(crate) fn ingest(file: &std::path::Path, line: Option<u64>, column: Option<&str>, message: impl Into<String>) -> Self {
        CliError::Ingest {
            file: file.to_path_buf(),
            line,
            column: column.map(str::to_string),
            message: message.into(),
        }
    }
}

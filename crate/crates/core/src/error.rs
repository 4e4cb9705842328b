use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SrnnError> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// Variants double as the error categories printed by the command line
/// front end (`error: <category>: <detail>`).
#[derive(Debug, Error)]
pub enum SrnnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}")]
    Input(String),

    #[error("graph: {0}")]
    Graph(String),

    #[error("at byte {offset}: {message}")]
    ArchSyntax { offset: usize, message: String },

    #[error("{0}")]
    Compile(String),

    #[error("{0}")]
    Incompatible(String),

    #[error("{0}")]
    Data(String),

    #[error("{0}")]
    Checkpoint(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SrnnError {
    /// Machine-parseable category used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            SrnnError::Shape { .. } | SrnnError::Input(_) => "input",
            SrnnError::Graph(_) => "graph",
            SrnnError::ArchSyntax { .. } => "arch-syntax",
            SrnnError::Compile(_) => "compile",
            SrnnError::Incompatible(_) => "incompatible",
            SrnnError::Data(_) => "data",
            SrnnError::Checkpoint(_) => "checkpoint",
            SrnnError::Parse { .. } => "parse",
            SrnnError::Io { .. } => "io",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        SrnnError::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SrnnError::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use ktg_core::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ktg_core::Error),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid graph:\n{}", format_violations(.0))]
    InvalidGraph(Vec<Violation>),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("no trial completed")]
    NoCompletedTrials,
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n")
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

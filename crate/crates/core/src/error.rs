use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite loss for sample {sample}, model {model}")]
    NonFiniteLoss { sample: usize, model: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("unknown episode {0}")]
    UnknownEpisode(u32),

    #[error("bad magic in {path}: not a {expected} file")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported format version: expected {expected}, found {found}")]
    Version { expected: u32, found: u32 },

    #[error("checksum mismatch: file is corrupted")]
    Checksum,

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed payload: {0}")]
    Malformed(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("ordering error: expected position {expected}, got {got}")]
    Ordering { expected: usize, got: usize },
    #[error("attention row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("no audit samples: {0}")]
    EmptySamples(String),
    #[error("sample {sample}: {source}")]
    Sample {
        sample: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

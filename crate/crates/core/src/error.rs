use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two shapes that must agree do not; `lhs`/`rhs` are the offending shapes.
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received arguments it cannot work with.
    #[error("{op}: {msg}")]
    Op { op: &'static str, msg: String },

    #[error("config: {0}")]
    Config(String),

    /// Graph compilation failed at a specific layer.
    #[error("graph: layer {index} ({name}): {msg}")]
    Graph {
        index: usize,
        name: String,
        msg: String,
    },

    #[error("data: {msg}")]
    Data { msg: String },

    /// Malformed input file; `offset` is the byte position of the defect.
    #[error("data: {msg} (byte offset {offset} in {path})")]
    DataAt {
        msg: String,
        offset: u64,
        path: PathBuf,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Training aborted; message carries epoch/batch/loss diagnostics.
    #[error("train: {0}")]
    Train(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn op(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Op { op, msg: msg.into() }
    }
}

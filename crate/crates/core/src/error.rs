use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a 1x1 tensor, got {rows}x{cols}")]
    NotScalar { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate edge ({user}, {item})")]
    DuplicateEdge { user: usize, item: usize },

    #[error("id out of range: {kind} {id} (count {count})")]
    OutOfRange {
        kind: &'static str,
        id: usize,
        count: usize,
    },

    #[error("user {user} interacts with every item; no negative can be drawn")]
    UnsatisfiableNegative { user: usize },

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("no training edges")]
    NoTrainEdges,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

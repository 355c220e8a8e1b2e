use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: empty axis")]
    EmptyAxis { op: &'static str },

    #[error("degenerate embedding: vector norm below 1e-12")]
    DegenerateEmbedding,

    #[error("degenerate sentence: every token of `{0}` is out of vocabulary")]
    AllOutOfVocabulary(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty sentence")]
    EmptySentence,

    #[error("space unavailable: {0}")]
    SpaceUnavailable(String),

    #[error("unknown space `{0}`")]
    UnknownSpace(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),

    #[error("non-finite loss {loss} in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("ground truth `{0}` not in gallery")]
    GroundTruthAbsent(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("bad magic")]
    BadMagic,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("unexpected file kind {found} (expected {expected})")]
    Kind { found: u16, expected: u16 },

    #[error("truncated input while reading {0}")]
    Truncated(&'static str),

    #[error("{0} trailing bytes after last section")]
    TrailingBytes(usize),

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

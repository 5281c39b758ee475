use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("mask selects no rows")]
    DegenerateMask,
    #[error("zero-norm vector under cosine similarity")]
    ZeroNorm,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) => 3,
            Error::NonFinite(_) | Error::ZeroNorm | Error::Degenerate(_) | Error::Domain(_) => 4,
            Error::Checkpoint(_) => 5,
            _ => 1,
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },

    #[error("{op}: domain error ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("degenerate channel: {0}")]
    DegenerateChannel(String),

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("{0}")]
    Infeasible(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, shapes: &[&[usize]]) -> Self {
        Error::Shape { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
    }
}

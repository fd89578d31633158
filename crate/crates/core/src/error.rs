use std::path::PathBuf;

/// Errors raised anywhere in the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("expected a scalar, got shape {0:?}")]
    Rank(Vec<usize>),

    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),

    #[error("non-finite loss ({0})")]
    NonFinite(f64),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid selection plan: {0}")]
    Plan(String),

    #[error("invalid ratio schedule: {0}")]
    Schedule(String),

    #[error("strategy `{0}` needs a random generator")]
    MissingRng(&'static str),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("gradient map has no entry for parameter `{0}`")]
    MissingGradient(String),

    #[error("zeroth-order probe diverged (L+ = {plus}, L- = {minus})")]
    ZeroOrderDivergence { plus: f32, minus: f32 },

    #[error("corpus ingestion failed for {path}: {detail}")]
    Ingestion { path: PathBuf, detail: String },

    #[error("checkpoint corrupted at entry `{entry}`: {detail}")]
    Corruption { entry: String, detail: String },

    #[error("reporting error: {0}")]
    Reporting(String),

    #[error("suite error: {0}")]
    Suite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {dims:?} for {len} elements")]
    InvalidShape { dims: Vec<usize>, len: usize },

    #[error("fully masked row {row} in softmax")]
    FullyMaskedRow { row: usize },

    #[error("loss must be a scalar, got dims {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic bytes in {path}: expected TFV1")]
    BadMagic { path: PathBuf },

    #[error("unsupported dtype code {code} in {path}")]
    BadDType { path: PathBuf, code: u8 },

    #[error("unsupported rank {rank} in {path}")]
    BadRank { path: PathBuf, rank: usize },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("unknown relation {0:?}")]
    UnknownRelation(String),

    #[error("missing fixture for class {class:?} under {dir}")]
    MissingFixture { class: String, dir: PathBuf },

    #[error("http request failed after {attempts} attempts: {msg}")]
    Http { attempts: usize, msg: String },

    #[error("missing embeddings for keys: {0:?}")]
    MissingEmbeddings(Vec<String>),

    #[error("missing prompt for classes: {0:?}")]
    MissingPrompt(Vec<String>),

    #[error("zero-norm visual vector")]
    ZeroNorm,

    #[error("empty batch in {0}")]
    EmptyBatch(&'static str),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: u64,
        detail: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}

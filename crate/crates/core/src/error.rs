use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("support error: q[{index}] = 0 where p[{index}] = {p}")]
    Support { index: usize, p: f64 },

    #[error("invalid input to {op}: {detail}")]
    Input { op: &'static str, detail: String },

    #[error("matrix is not positive semi-definite: smallest eigenvalue {min_eigenvalue:e}")]
    NotPsd { min_eigenvalue: f64 },

    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    #[error("latent split m={m} + n={n} does not equal {layers} layers")]
    Split { m: usize, n: usize, layers: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("token id {id} outside vocabulary of {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("pixel {index} = {value} is outside the invertible range")]
    Range { index: usize, value: f64 },

    #[error("need at least {required} samples, got {got}")]
    SampleCount { required: usize, got: usize },

    #[error("batch size {0} is too small for in-batch negative sampling")]
    NegativeSampling(usize),

    #[error("training diverged at step {step}: {term} = {value}")]
    Divergence {
        step: usize,
        term: &'static str,
        value: f64,
    },

    #[error("encoder pretraining reached accuracy {accuracy:.4} (< {target})")]
    Pretraining { accuracy: f64, target: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("variant {variant} (seed {seed}): {source}")]
    Variant {
        variant: String,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

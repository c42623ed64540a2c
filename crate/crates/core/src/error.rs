use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{0}: mask selects no positions")]
    EmptyMask(&'static str),
    #[error("backward requires a scalar root, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph node {node} references input {input} that is not an earlier node")]
    Cycle { node: usize, input: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("seed ranges overlap: {0}")]
    Overlap(String),
    #[error("checkpoint config hash {found} does not match expected {expected}")]
    ConfigHash { expected: String, found: String },
    #[error("loss became non-finite at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dims(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

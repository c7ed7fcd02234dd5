use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    Shape { shape: Vec<usize>, reason: String },
    #[error("{op}: degenerate input ({reason})")]
    Degenerate { op: &'static str, reason: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("coordinate {value} outside the supported lattice range")]
    Range { value: f64 },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("archive format: {0}")]
    Format(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

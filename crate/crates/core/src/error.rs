use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op} (node {node}): {detail}")]
    Shape {
        op: &'static str,
        node: usize,
        detail: String,
    },

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} is outside the vocabulary of size {vocab_size}")]
    OutOfVocabulary { id: usize, vocab_size: usize },

    #[error("unknown word `{0}`")]
    UnknownWord(String),

    #[error("conflicting edits: {0}")]
    ConflictingEdits(String),

    #[error("misaligned dataset: {0}")]
    Misaligned(String),

    #[error("non-projective tree: arcs {0:?} and {1:?} cross")]
    NonProjective((usize, usize), (usize, usize)),

    #[error("mixed attribution methods: {0}")]
    MixedMethods(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid tensor container: {0}")]
    Container(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("configuration errors:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 config, 3 missing artifact, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

//! G-BERT: ontology-aware visit representations pre-trained on single
//! visits and fine-tuned for medication recommendation.

pub mod checks;
pub mod config;
pub mod data;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod numerics;
pub mod ontoembed;
pub mod ontology;
pub mod pretrain;
pub mod schedule;
pub mod visit_encoder;

use numerics::NumericsError;
use ontology::OntologyError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Data { path: String, line: usize, msg: String },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Validation failures are caller mistakes (bad input, mismatched files);
    /// everything else is a runtime failure.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Numerics(e) => !matches!(e, NumericsError::NonFiniteGradient(_)),
            Error::Io { .. } => false,
            _ => true,
        }
    }
}

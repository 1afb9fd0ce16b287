use thiserror::Error;

use crate::analysis::AnalysisError;
use crate::configuration::ConfigurationError;
use crate::dynamics::DynamicsError;
use crate::forms::FormsError;
use crate::persistence::PersistenceError;
use crate::pointprocess::PointProcessError;
use crate::tagged::TaggedError;

/// Crate-level error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Configuration(#[from] ConfigurationError),
    #[error(transparent)]
    PointProcess(#[from] PointProcessError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Tagged(#[from] TaggedError),
    #[error(transparent)]
    Forms(#[from] FormsError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Persistence(#[from] PersistenceError),
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

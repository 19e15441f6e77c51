use thiserror::Error;

use crate::chemistry::GraphError;
use crate::env::EnvError;
use crate::gridworld::MapError;
use crate::harness::HarnessError;
use crate::learner::LearnerError;
use crate::valuenet::NetError;

/// Crate-wide error, wrapping the per-module error types.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

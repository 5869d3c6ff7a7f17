use thiserror::Error;

use crate::store::StoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("Newton failed to converge at step {step}, stage {stage} (residual history {history:?})")]
    StageFailure {
        step: usize,
        stage: usize,
        history: Vec<f64>,
    },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("degenerate mapping: {0}")]
    DegenerateMapping(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("finite-difference step {step:e} underflows at value {value:e}")]
    StepUnderflow { step: f64, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Store(#[from] StoreError),
}

use crossmpt_core::{CheckpointError, CodeError, EnsembleError, EvalError, ModelError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Code(#[from] CodeError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io { path: path.display().to_string(), source }
    }

    /// 0 ok, 1 runtime failure, 2 bad usage or config, 3 non-finite training.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Train(TrainError::NonFinite { .. }) => 3,
            CliError::Train(TrainError::Config(_) | TrainError::Resume(_) | TrainError::Model(_)) => 2,
            CliError::Train(TrainError::Code(_) | TrainError::Ensemble(_)) => 2,
            CliError::Eval(EvalError::Model(_) | EvalError::Position { .. }) => 2,
            CliError::Code(_) | CliError::Ensemble(_) | CliError::Model(_) => 2,
            _ => 1,
        }
    }
}

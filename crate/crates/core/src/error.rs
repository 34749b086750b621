use crate::corpus::CorpusError;
use crate::evalkit::EvalError;
use crate::neural::NeuralError;
use crate::param_store::StoreError;
use crate::ties_merge::MergeError;
use crate::unlearn::UnlearnError;

/// Top-level error; [`Error::exit_code`] maps it onto the CLI's exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("all subsets are empty after processing; nothing to unlearn")]
    AllSubsetsEmpty,
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Io { path: path.display().to_string(), message: e.to_string() }
    }

    fn is_numeric(&self) -> bool {
        let neural = match self {
            Error::Neural(n) => Some(n),
            Error::Unlearn(UnlearnError::Neural(n)) => Some(n),
            Error::Eval(EvalError::Neural(n)) => Some(n),
            _ => None,
        };
        matches!(neural, Some(NeuralError::NonFiniteLoss(_)))
    }

    /// 2: usage, 3: data, 4: numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ if self.is_numeric() => 4,
            _ => 3,
        }
    }
}

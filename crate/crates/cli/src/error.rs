use magic_nas::analysis::AnalysisError;
use magic_nas::search::SearchError;
use magic_nas::supernet::{CheckpointError, NetError};
use magic_nas::trainer::TrainError;

/// Failure of a subcommand, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration or inputs; exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Failure while running, including divergence; exit code 3.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::InvalidChild { .. } | NetError::BatchShape { .. } => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Sampler(_) => CliError::Config(e.to_string()),
            TrainError::Net(n) => n.into(),
            TrainError::Diverged { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::TooFew(_) | AnalysisError::Duplicate(_) | AnalysisError::Probe(_) => {
                CliError::Config(e.to_string())
            }
            AnalysisError::Net(n) => n.into(),
            AnalysisError::Train(t) => t.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Train(t) => t.into(),
            SearchError::Net(n) => n.into(),
            SearchError::Config(_) => CliError::Config(e.to_string()),
            SearchError::Hook(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Config(format!("checkpoint: {}", e))
    }
}

impl From<magic_nas::sampling::SamplerError> for CliError {
    fn from(e: magic_nas::sampling::SamplerError) -> Self {
        CliError::Config(e.to_string())
    }
}

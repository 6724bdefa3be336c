use thiserror::Error;

/// Command failures, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    /// 0 success, 2 config, 3 data, 4 transport; 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<coldfuse::Error> for CliError {
    fn from(e: coldfuse::Error) -> Self {
        use coldfuse::Error as E;
        let msg = e.to_string();
        match e.root() {
            E::Transport(_) => CliError::Transport(msg),
            E::Io { .. } | E::Codec(_) | E::UnknownTask(_) => CliError::Data(msg),
            E::NonFinite(_) => CliError::Internal(msg),
            _ => CliError::Config(msg),
        }
    }
}

impl From<coldfuse_hub::HubError> for CliError {
    fn from(e: coldfuse_hub::HubError) -> Self {
        match e {
            coldfuse_hub::HubError::Core(c) => c.into(),
            other => CliError::Transport(other.to_string()),
        }
    }
}

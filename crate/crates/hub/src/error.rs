use std::io;

use crate::wire::{ErrorCode, FrameError};

pub type Result<T, E = HubError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum HubError {
    /// Could not reach the hub or the connection failed mid-exchange.
    #[error("transport: {0}")]
    Transport(String),
    #[error("frame: {0}")]
    Frame(#[from] FrameError),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("malformed payload: {0}")]
    Malformed(String),
    /// The hub answered with an ERROR frame.
    #[error("hub rejected request ({code:?}): {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected reply: {0}")]
    Unexpected(String),
    #[error(transparent)]
    Core(#[from] coldfuse::Error),
}

impl From<io::Error> for HubError {
    fn from(e: io::Error) -> Self {
        HubError::Transport(e.to_string())
    }
}

impl HubError {
    /// Worth retrying on a fresh connection.
    pub fn is_transient(&self) -> bool {
        match self {
            HubError::Transport(_) => true,
            HubError::Frame(f) => matches!(f, FrameError::Io(_) | FrameError::Closed | FrameError::Truncated),
            _ => false,
        }
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            HubError::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }
}

impl From<HubError> for coldfuse::Error {
    fn from(e: HubError) -> Self {
        match e {
            HubError::Core(e) => e,
            other => coldfuse::Error::Transport(other.to_string()),
        }
    }
}

//! Live closed-loop sessions streamed over WebSocket.

pub mod engine;
pub mod protocol;
pub mod server;
pub mod session;

use thiserror::Error;

pub use protocol::{ErrorCode, Inbound, Outbound, SessionState, SCHEMA_VERSION};
pub use server::{serve_blocking, Server, ServerConfig};
pub use session::{Ack, SessionManager};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LiveError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("`{command}` is not valid while the session is {state:?}")]
    State { command: &'static str, state: SessionState },
    #[error("state index {index} is outside 1..={n}")]
    Index { index: usize, n: usize },
    #[error("impulse magnitude must be finite, got {0}")]
    Magnitude(f64),
    #[error("realtime ratio must be finite and non-negative, got {0}")]
    Ratio(f64),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("at most {0} sessions may be active")]
    ResourceLimit(usize),
    #[error("command queue is full")]
    Busy,
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl LiveError {
    pub fn code(&self) -> ErrorCode {
        match self {
            LiveError::UnknownSession(_) => ErrorCode::UnknownSession,
            LiveError::State { .. } => ErrorCode::InvalidState,
            LiveError::Index { .. } => ErrorCode::IndexOutOfRange,
            LiveError::Magnitude(_) => ErrorCode::InvalidMagnitude,
            LiveError::Ratio(_) => ErrorCode::InvalidRatio,
            LiveError::Scenario(_) => ErrorCode::InvalidScenario,
            LiveError::ResourceLimit(_) => ErrorCode::ResourceLimit,
            LiveError::Busy => ErrorCode::Busy,
            LiveError::Numerical(_) | LiveError::Io(_) | LiveError::Internal(_) => ErrorCode::Internal,
        }
    }
}

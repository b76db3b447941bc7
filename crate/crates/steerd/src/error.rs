use rhythmic_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum SteerError {
    #[error("unknown session {0}")]
    UnknownSession(u64),

    #[error("invalid command: {0}")]
    InvalidCommand(String),

    #[error("session {0} has ended")]
    SessionEnded(u64),

    #[error("cannot bind {addr}: {source}")]
    PortInUse { addr: std::net::SocketAddr, source: std::io::Error },

    #[error("malformed replay log: {0}")]
    Replay(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SteerError {
    /// Short stable category; core errors keep their own.
    pub fn category(&self) -> &'static str {
        match self {
            SteerError::UnknownSession(_) | SteerError::SessionEnded(_) => "service",
            SteerError::InvalidCommand(_) => "config",
            SteerError::PortInUse { .. } | SteerError::Io(_) => "io",
            SteerError::Replay(_) => "format",
            SteerError::Core(e) => e.category(),
        }
    }
}

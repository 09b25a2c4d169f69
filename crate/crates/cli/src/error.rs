use std::fmt;

use neurachip_sim::SimError;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or arguments. Exit 1.
    Usage(String),
    /// Unreadable inputs or an invalid configuration. Exit 2.
    Validation(anyhow::Error),
    /// The simulation disagreed with the oracle or broke a conservation law. Exit 3.
    Integrity(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Validation(_) => 2,
            Failure::Integrity(_) => 3,
        }
    }

    pub fn validation(e: impl Into<anyhow::Error>) -> Self {
        Failure::Validation(e.into())
    }

    pub fn integrity(e: impl Into<anyhow::Error>) -> Self {
        Failure::Integrity(e.into())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Validation(e) => write!(f, "invalid input: {e:#}"),
            Failure::Integrity(e) => write!(f, "integrity failure: {e:#}"),
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Mapping(_) | SimError::Threads(_) => Failure::validation(e),
            SimError::Memory(_) | SimError::Watchdog { .. } | SimError::Integrity(_) => Failure::integrity(e),
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

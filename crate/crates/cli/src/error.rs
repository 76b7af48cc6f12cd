use thiserror::Error;

/// Process exit status of each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const PREREQUISITE: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint {0} does not exist")]
    MissingCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{failed} of {total} gradient checks failed")]
    GradCheck { failed: usize, total: usize },

    #[error(transparent)]
    Core(#[from] refnet::Error),
}

impl CliError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use refnet::Error as E;
        match self {
            CliError::Config(_) | CliError::Io { .. } => exit::CONFIG,
            CliError::MissingCheckpoint(_) => exit::PREREQUISITE,
            CliError::GradCheck { .. } => exit::NUMERIC,
            CliError::Core(e) => match e {
                E::Prerequisite(_) | E::Corrupt(_) | E::VersionMismatch { .. } => exit::PREREQUISITE,
                E::Diverged { .. } | E::NonFinite { .. } | E::FreezeViolation(_) => exit::NUMERIC,
                _ => exit::CONFIG,
            },
        }
    }
}

use std::path::{Path, PathBuf};

/// Process exit status for each failure class.
pub mod exit {
    pub const OK: i32 = 0;
    pub const INTERNAL: i32 = 1;
    pub const INPUT: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] prqa_core::Error),

    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },

    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn config(path: &Path, msg: impl Into<String>) -> Self {
        CliError::Config {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use prqa_core::Error as E;
        match self {
            CliError::Config { .. } | CliError::Usage(_) => exit::INPUT,
            CliError::Core(e) => match e {
                E::Parse { .. } | E::Io { .. } | E::Data(_) | E::Config(_) | E::Usage(_) | E::Parameter(_) => {
                    exit::INPUT
                }
                E::Divergence { .. } | E::Numeric(_) => exit::DIVERGENCE,
                E::Dimension { .. } | E::Internal(_) => exit::INTERNAL,
            },
        }
    }
}

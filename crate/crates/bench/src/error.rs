use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("filter collapsed in {runs} run(s)")]
    Collapsed { runs: usize },
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: switchem::Error,
    },
}

impl From<switchem::Error> for CliError {
    fn from(source: switchem::Error) -> Self {
        CliError::Core { context: "error".into(), source }
    }
}

impl CliError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io { path: path.as_ref().display().to_string(), source }
    }

    pub fn core(context: impl Into<String>, source: switchem::Error) -> Self {
        CliError::Core { context: context.into(), source }
    }

    /// 2 for filter collapse, 1 for everything else.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Collapsed { .. } => ExitCode::from(2),
            _ => ExitCode::from(1),
        }
    }
}

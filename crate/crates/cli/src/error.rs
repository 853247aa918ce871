use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Syntax, unknown key or type error; the message carries line and column.
    #[error("config: {0}")]
    Parse(String),

    #[error(
        "config{}: [{section}]{}: {message}",
        file.as_ref().map(|f| format!(" {f}")).unwrap_or_default(),
        line.map(|l| format!(" line {l}")).unwrap_or_default()
    )]
    Config { file: Option<String>, section: String, line: Option<usize>, message: String },

    #[error(transparent)]
    Core(#[from] adagp_core::Error),

    #[error("{0}")]
    Other(String),
}

impl CliError {
    /// Prefixes config errors with the file they came from.
    pub fn in_file(self, path: &Path) -> Self {
        match self {
            CliError::Parse(m) => CliError::Parse(format!("{}: {m}", path.display())),
            CliError::Config { section, line, message, .. } => {
                CliError::Config { file: Some(path.display().to_string()), section, line, message }
            }
            other => other,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Other(format!("json: {e}"))
    }
}

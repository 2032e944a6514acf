use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] facepref::Error),
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("inputs come from different configurations: {0}")]
    MixedManifests(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Server(#[from] facepref_server::ServerError),
    #[error("server: {0}")]
    Serve(std::io::Error),
}

impl CliError {
    /// Stable identifier printed in the error line.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::MissingInput(_) => "missing_input",
            CliError::MixedManifests(_) => "mixed_manifests",
            CliError::Usage(_) => "usage",
            CliError::Server(e) => e.kind(),
            CliError::Serve(_) => "serve",
        }
    }

    /// `{"error": kind, "message": text}` on a single line.
    pub fn line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

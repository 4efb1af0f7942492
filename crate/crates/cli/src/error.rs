use std::path::PathBuf;

use counterfact_service::ApiError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid or incomplete run configuration; the message names the key.
    #[error("config: {0}")]
    Config(String),

    /// Flags that do not fit together or point at unusable inputs.
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] counterfact_core::Error),

    #[error("{}", api_message(.0))]
    Api(ApiError),
}

fn api_message(e: &ApiError) -> String {
    let body = e.body();
    match body.error.field {
        Some(f) => format!("{f}: {}", body.error.message),
        None => body.error.message,
    }
}

impl From<ApiError> for CliError {
    fn from(e: ApiError) -> Self {
        CliError::Api(e)
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

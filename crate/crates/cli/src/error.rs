use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("{stage}: missing input {path}: {detail}")]
    MissingInput { stage: String, path: String, detail: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: condeepmod::Error,
    },

    #[error("{stage}: postcondition violated: {detail}")]
    Postcondition { stage: String, detail: String },
}

impl CliError {
    pub fn stage(stage: &str) -> impl FnOnce(condeepmod::Error) -> CliError + '_ {
        move |source| CliError::Stage {
            stage: stage.into(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config { .. } => "config",
            CliError::MissingInput { .. } => "missing_input",
            CliError::Stage { source, .. } => source.kind(),
            CliError::Postcondition { .. } => "postcondition",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } | CliError::MissingInput { .. } => 2,
            CliError::Stage { .. } | CliError::Postcondition { .. } => 1,
        }
    }

    /// Machine-readable form printed on stderr.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = json!({ "error": self.kind(), "message": self.to_string() });
        match self {
            CliError::Config { path, .. } => v["path"] = json!(path),
            CliError::MissingInput { stage, path, .. } => {
                v["stage"] = json!(stage);
                v["path"] = json!(path);
            }
            CliError::Stage { stage, .. } | CliError::Postcondition { stage, .. } => v["stage"] = json!(stage),
            CliError::Usage(_) => {}
        }
        v
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

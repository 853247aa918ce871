use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch{}: {msg}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Shape { layer: Option<usize>, msg: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid model: {0}")]
    Build(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible schedule: {0}")]
    Schedule(String),

    #[error("{0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),

    #[error("dataset: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape { layer: None, msg: msg.into() }
    }

    /// Attaches a layer index to a shape error; other errors pass through.
    pub fn at_layer(self, index: usize) -> Self {
        match self {
            Error::Shape { layer: None, msg } => Error::Shape { layer: Some(index), msg },
            Error::NonFinite { context } => Error::NonFinite {
                context: format!("layer {index} ({context})"),
            },
            other => other,
        }
    }
}

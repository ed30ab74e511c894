use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum SnnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("degenerate threshold for weight layer {slot}: max pre-activation was {value}")]
    DegenerateThreshold { slot: usize, value: f64 },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SnnError>;

impl SnnError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        SnnError::Io {
            context: context.into(),
            source,
        }
    }
}

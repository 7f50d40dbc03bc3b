use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum MattingError {
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("unsupported raster format: {0}")]
    Format(String),
    #[error("value outside its domain: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("wrong number of inputs: {0}")]
    Arity(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("model not ready: {0}")]
    State(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint format `{found}` is not supported (expected `{expected}`)")]
    Version { found: String, expected: String },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Nn(#[from] medmatting_nn::NnError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = MattingError> = std::result::Result<T, E>;

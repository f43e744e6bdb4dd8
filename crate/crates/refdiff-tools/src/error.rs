//! Tool-level errors carry an exit-code category so the CLI can fail with a
//! one-line machine-parsable message.

use refdiff_core::error::CoreError;

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    /// Bad configuration or arguments. Exit code 2.
    #[error("error[config]: {0}")]
    Config(String),
    /// Unreadable, unwritable, or corrupt artifacts. Exit code 3.
    #[error("error[data]: {0}")]
    Data(String),
    /// Numerical failure inside a model run. Exit code 4.
    #[error("error[numeric]: {0}")]
    Numeric(String),
}

impl ToolError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ToolError::Config(_) => 2,
            ToolError::Data(_) => 3,
            ToolError::Numeric(_) => 4,
        }
    }
}

impl From<CoreError> for ToolError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(m) => ToolError::Numeric(m),
            CoreError::Missing(m) => ToolError::Data(m),
            CoreError::InvalidConfig(m) | CoreError::ShapeMismatch(m) => ToolError::Config(m),
        }
    }
}

impl From<std::io::Error> for ToolError {
    fn from(e: std::io::Error) -> Self {
        ToolError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for ToolError {
    fn from(e: serde_json::Error) -> Self {
        ToolError::Data(e.to_string())
    }
}

impl From<toml::de::Error> for ToolError {
    fn from(e: toml::de::Error) -> Self {
        ToolError::Config(e.to_string())
    }
}

impl From<toml::ser::Error> for ToolError {
    fn from(e: toml::ser::Error) -> Self {
        ToolError::Config(e.to_string())
    }
}

impl From<image::ImageError> for ToolError {
    fn from(e: image::ImageError) -> Self {
        ToolError::Data(e.to_string())
    }
}

pub type Result<T> = core::result::Result<T, ToolError>;

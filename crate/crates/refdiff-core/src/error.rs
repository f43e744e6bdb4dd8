//! Error type shared by every core module.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by core operations.
///
/// Shape mismatches and invalid configurations are programming errors in the
/// caller and abort the operation; `NonFinite` is the trainer's signal that a
/// step produced NaN or infinity and the run must stop rather than continue
/// on poisoned parameters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CoreError {
    /// Tensor shapes do not satisfy the operation's contract.
    ShapeMismatch(String),
    /// A configuration value is out of its documented range.
    InvalidConfig(String),
    /// A computation produced NaN or infinity.
    NonFinite(String),
    /// A named parameter or tensor is missing.
    Missing(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            CoreError::Missing(msg) => write!(f, "missing: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;

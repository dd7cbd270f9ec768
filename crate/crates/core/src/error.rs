use alloc::string::String;

/// Errors raised by the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes, strides or parameter sizes that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// A non-finite value appeared inside a named layer.
    #[error("numeric error in {layer}: {detail}")]
    Numeric { layer: String, detail: String },
    /// Synthetic data generation could not satisfy its constraints.
    #[error("generation error: {0}")]
    Generation(String),
}

impl Error {
    /// Short machine-readable category used by command-line front ends.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Usage(_) => "usage",
            Error::Numeric { .. } => "numeric",
            Error::Generation(_) => "generation",
        }
    }

    pub(crate) fn numeric(layer: &str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            layer: layer.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(alloc::format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(alloc::format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use usage_err;

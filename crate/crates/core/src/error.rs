use alloc::string::String;

/// Errors produced anywhere in the core pipeline.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand extents are incompatible for the requested primitive.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    /// A hyperparameter or architectural setting is invalid.
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A primitive produced NaN or an infinity outside the masking sentinel.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    /// Input data cannot be used (too short, empty, inconsistent).
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

macro_rules! dim_err {
    ($op:expr, $($arg:tt)*) => {
        $crate::Error::Dimension { op: $op, detail: alloc::format!($($arg)*) }
    };
}
pub(crate) use dim_err;

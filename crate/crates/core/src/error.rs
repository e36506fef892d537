use alloc::string::String;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// The constraint matrix has full column rank, leaving no room for an increment.
    #[error("null space is empty: constraint rank {rank} equals input dimension {dim}")]
    NullSpaceEmpty { rank: usize, dim: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error("duplicate concept `{0}` in subset")]
    DuplicateConcept(String),
    #[error("classifier has not been fitted")]
    UntrainedClassifier,
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[macro_export]
#[doc(hidden)]
macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::Error::Shape(alloc::format!($($arg)*))
    };
}

use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not satisfy an operation's contract.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An argument violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),

    /// Stateful object used before it is ready (e.g. eval-mode batch norm
    /// with uninitialized running statistics) or found corrupted.
    #[error("invalid state: {0}")]
    State(String),

    /// A NaN or infinity appeared at an op boundary.
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Configuration file problem (unknown key, bad value, missing field).
    #[error("config: {0}")]
    Config(String),

    /// Malformed input file (weights, PPM/PGM, box lists).
    #[error("parse: {0}")]
    Parse(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }
}

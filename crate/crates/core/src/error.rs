//! Error types shared across the crate.

use thiserror::Error;

/// Maximum application payload of a single message, in bytes.
pub const MAX_MSG_SIZE: usize = 8 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum Error {
    #[error("message size {got} outside supported range 1..={MAX_MSG_SIZE} bytes")]
    SizeOutOfRange { got: usize },

    #[error("header codec: {0}")]
    Codec(&'static str),

    #[error("unknown packet type nibble {0}")]
    UnknownPktType(u8),

    #[error("configuration: {0}")]
    Config(String),

    #[error(
        "session credit budget exhausted: committed {committed} + requested {requested} \
         exceeds receive queue depth {rq}"
    )]
    SessionBudget { committed: u32, requested: u32, rq: u32 },

    #[error("handler type {0} already registered")]
    DuplicateHandler(u8),

    #[error("invalid operation: {0}")]
    Invalid(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

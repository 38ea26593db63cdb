//! Error type shared across the crate.
//!
//! Variants are grouped by how callers are expected to react: `Config`
//! and `Dimension` mean the caller constructed something invalid, the
//! data/IO variants mean an input file is unusable, and `JudgeTransport`
//! means the external judge endpoint could not be reached even after
//! retries.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or a violated call contract.
    #[error("configuration error: {0}")]
    Config(String),

    /// A malformed record in a data file; `line` is 1-based.
    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    /// A word that is not part of the codec vocabulary.
    #[error("unknown word {0:?}")]
    UnknownWord(String),

    /// A token id outside the codec vocabulary.
    #[error("unknown token id {0}")]
    UnknownToken(u32),

    /// Mismatched vector lengths or vocabulary sizes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// The judge endpoint failed after all retries.
    #[error("judge transport failure: {0}")]
    JudgeTransport(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

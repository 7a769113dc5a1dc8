//! Desk-scale visual-language pre-training: interleaved and paired
//! image-text corpora, token packing, a toy VLM with exact gradients,
//! staged training under freeze policies, alignment diagnostics, and
//! k-shot evaluation.

pub mod corpus;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod images;
pub mod manifest;
pub mod model;
pub mod packing;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

pub(crate) fn sha256(bytes: &[u8]) -> [u8; 32] {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).into()
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(sha256(bytes))
}

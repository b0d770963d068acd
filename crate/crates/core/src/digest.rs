//! SHA-256 fingerprints of configuration values.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub type Digest32 = [u8; 32];

pub fn sha256(bytes: &[u8]) -> Digest32 {
    Sha256::digest(bytes).into()
}

/// Digest of the compact JSON encoding of `value`.
///
/// Struct fields serialize in declaration order, so the result is stable for
/// a given type definition.
pub fn json_digest<T: Serialize>(value: &T) -> Result<Digest32> {
    Ok(sha256(&serde_json::to_vec(value)?))
}

pub fn to_hex(d: &Digest32) -> String {
    hex::encode(d)
}

pub fn from_hex(s: &str) -> Option<Digest32> {
    let bytes = hex::decode(s).ok()?;
    bytes.try_into().ok()
}

//! Stable content hashes for configs and label maps.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the value's JSON form with object keys sorted.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config types serialize to JSON");
    let text = serde_json::to_string(&v).expect("JSON values serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// First 12 hex digits, for file names.
pub fn short_hash<T: Serialize>(value: &T) -> String {
    canonical_hash(value)[..12].to_string()
}

//! Small shared helpers.

use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of the input bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lowercase the text and collapse runs of whitespace to single spaces.
pub fn normalize_ws(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

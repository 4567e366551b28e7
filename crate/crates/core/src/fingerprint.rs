use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256.
pub fn digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

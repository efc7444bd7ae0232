//! Short content digests used to tie pipeline artifacts together.

use sha2::{Digest, Sha256};

/// Hex SHA-256 of `bytes`, truncated to 16 characters.
pub fn short_digest(bytes: &[u8]) -> String {
    let full = Sha256::digest(bytes);
    full.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest of any serializable value through its canonical JSON form.
pub fn json_digest<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("digest input serializes");
    short_digest(&json)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable() {
        assert_eq!(short_digest(b"abc"), "ba7816bf8f01cfea");
        assert_eq!(short_digest(b""), "e3b0c44298fc1c14");
    }
}

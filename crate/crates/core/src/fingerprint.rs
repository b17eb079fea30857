//! Content fingerprints used to tie reports back to the exact model, config,
//! and preprocessing that produced them.

use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

/// Hex sha256 of a byte slice.
pub fn of_bytes(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}

/// Hex sha256 of a serializable value's canonical JSON form.
pub fn of_json<T: serde::Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("fingerprinted values serialize");
    of_bytes(&json)
}

/// Hex sha256 of a file's contents, streamed.
pub fn of_file(path: &Path) -> std::io::Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_for_equal_inputs() {
        assert_eq!(of_bytes(b"abc"), of_bytes(b"abc"));
        assert_ne!(of_bytes(b"abc"), of_bytes(b"abd"));
    }
}

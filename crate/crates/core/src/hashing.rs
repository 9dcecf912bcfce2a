//! Content hashes used for cache keys and checkpoint fingerprints.

use sha2::{Digest, Sha256};

/// Incremental SHA-256 over length-prefixed parts, so `["ab", "c"]` and
/// `["a", "bc"]` never collide.
#[derive(Clone, Default)]
pub struct ContentHasher {
    inner: Sha256,
}

impl ContentHasher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn part(mut self, bytes: impl AsRef<[u8]>) -> Self {
        let bytes = bytes.as_ref();
        self.inner.update((bytes.len() as u64).to_le_bytes());
        self.inner.update(bytes);
        self
    }

    pub fn finish(self) -> String {
        hex::encode(self.inner.finalize())
    }

    /// First eight bytes of the digest as an integer, for seeding.
    pub fn finish_u64(self) -> u64 {
        let digest = self.inner.finalize();
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(buf)
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

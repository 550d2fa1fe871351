use sha2::{Digest, Sha256};

/// Derives an independent sub-seed from a run seed and a textual tag.
///
/// Stable across platforms and releases: the first eight bytes of
/// `sha256(le_bytes(base) || tag)`, little-endian.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

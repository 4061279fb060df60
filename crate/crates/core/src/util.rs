//! Small shared helpers: stable hashing and seed derivation.

/// FNV-1a over raw bytes; stable across platforms and runs.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h
}

/// Derive an independent sub-seed from a base seed and a role tag, so
/// every RNG stream in a run is pinned by (seed, purpose).
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    fnv1a(tag.as_bytes()) ^ base.rotate_left(23)
}

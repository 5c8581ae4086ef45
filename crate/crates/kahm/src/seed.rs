//! Deterministic seed derivation.
//!
//! One master seed flows into a run; every stage derives its own seed by
//! stable hashing of (master, stage tag, index). FNV-1a over the raw bytes
//! keeps the derivation identical across platforms and builds.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(state: u64, bytes: &[u8]) -> u64 {
    let mut h = state;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Stable 64-bit hash of a byte string.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    fnv1a(FNV_OFFSET, bytes)
}

/// Derive a stage seed from a master seed, a stage tag, and an index.
pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    h = fnv1a(h, tag.as_bytes());
    fnv1a(h, &index.to_le_bytes())
}

//! Small, platform-independent hashing helpers.

use sha2::{Digest, Sha256};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// One step of the SplitMix64 output function applied to a counter value.
///
/// Used as a counter-based stream: `splitmix64(seed + k * GAMMA)` for k = 0, 1, ...
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const SPLITMIX_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// k-th element of the counter-based stream for `seed`, mapped to [-1, 1).
pub fn stream_unit(seed: u64, k: u64) -> f64 {
    let bits = splitmix64(seed.wrapping_add(k.wrapping_add(1).wrapping_mul(SPLITMIX_GAMMA)));
    // top 53 bits -> [0, 1)
    let u = (bits >> 11) as f64 / (1u64 << 53) as f64;
    2.0 * u - 1.0
}

/// Hex digest of the prompt pair, used as a mock-matcher key and in
/// optimization histories.
pub fn prompt_hash(a: &str, b: &str) -> String {
    let mut buf = Vec::with_capacity(a.len() + b.len() + 1);
    buf.extend_from_slice(a.as_bytes());
    buf.push(0x1f);
    buf.extend_from_slice(b.as_bytes());
    format!("{:016x}", fnv1a64(&buf))
}

/// SHA-256 hex digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

//! Portable hashing and seed-stream primitives.
//!
//! These are pinned exactly (FNV-1a-64 and splitmix64) so golden vectors
//! produced by the toy encoders agree across implementations.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 stream (Steele, Lea & Flood).
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Top 24 bits mapped to `u / 2^23 - 1`, i.e. a value in `[-1, 1)`.
    pub fn next_signed_unit(&mut self) -> f64 {
        let u = self.next_u64() >> 40;
        u as f64 / (1u64 << 23) as f64 - 1.0
    }

    /// Top 53 bits as a uniform in `[0, 1)`.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Derive an independent sub-seed for a named consumer of randomness.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    SplitMix64::new(seed ^ fnv1a64(name.as_bytes())).next_u64()
}

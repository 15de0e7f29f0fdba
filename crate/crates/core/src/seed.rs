//! Counter-based seed derivation: any (master, stream, index) triple maps to
//! an independent 64-bit seed, so every episode or iteration can be
//! regenerated in isolation.

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(mix64(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93)) ^ index)
}

/// Stream identifiers used across the crate.
pub mod stream {
    pub const TRAIN_EPISODE: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const EVAL_EPISODE: u64 = 3;
    pub const ANNOTATION: u64 = 4;
    pub const PROBE_EPISODE: u64 = 5;
    pub const INIT: u64 = 6;
}

//! Seeded pseudo-random streams.
//!
//! Everything random in the crate (initialization, dropout masks, shuffling,
//! corpus synthesis) draws from a SplitMix64 stream derived from a root seed and
//! a path of integer labels, so independent consumers never share state.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the stream at `path` under `root`.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(root), |h, &p| mix(h ^ mix(p)))
}

pub fn stream(root: u64, path: &[u64]) -> SplitMix64 {
    SplitMix64::seed_from_u64(derive_seed(root, path))
}

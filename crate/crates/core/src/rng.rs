//! Seed derivation and the crate's single random generator.
//!
//! All randomness flows through ChaCha8 streams seeded from a `u64`. Per-sample
//! and per-epoch streams are derived by hashing the run seed with the indices,
//! so work can be split across threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a base seed together with any number of stream coordinates.
///
/// `derive_seed(run, &[sample, epoch])` is the noise seed for one sample in one
/// epoch.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Named stream tags so unrelated consumers of one run seed never collide.
pub mod stream {
    pub const NOISE: u64 = 0x006E_6F69_7365;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const DROPOUT: u64 = 0x6472_6F70;
    pub const INIT: u64 = 0x696E_6974;
    pub const GALLERY: u64 = 0x6761_6C6C;
    pub const ENCODER: u64 = 0x656E_6364;
    pub const RENDER: u64 = 0x7265_6E64;
    pub const NEURAL: u64 = 0x6E65_7572;
    pub const SPLIT: u64 = 0x7370_6C74;
    /// Epoch coordinate used for evaluation-time views.
    pub const EVAL_EPOCH: u64 = u64::MAX;
}

//! Deterministic seed derivation. All randomness in the crate flows through here.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a list of words into one seed; order matters.
pub(crate) fn derive(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x243f_6a88_85a3_08d3, |acc, &p| mix(acc ^ mix(p)))
}

pub(crate) fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

// Stream tags keep independent draws from the same seed apart.
pub(crate) const TAG_TEXT_HEAD: u64 = 1;
pub(crate) const TAG_CLASS_TOKENS: u64 = 2;
pub(crate) const TAG_SHIFTS: u64 = 3;
pub(crate) const TAG_IMAGE_NOISE: u64 = 4;
pub(crate) const TAG_TEMPLATE: u64 = 5;
pub(crate) const TAG_TRAIN_SAMPLES: u64 = 6;
pub(crate) const TAG_TEST_SAMPLES: u64 = 7;
pub(crate) const TAG_SHUFFLE: u64 = 8;
pub(crate) const TAG_RANDOM_STRATEGY: u64 = 9;

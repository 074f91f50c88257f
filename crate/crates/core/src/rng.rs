//! Deterministic seed derivation.
//!
//! Every random choice in the crate flows from a single run seed through
//! [`derive_seed`], so adding grid cells or reordering work never perturbs
//! the random stream of existing cells.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// One step of the splitmix64 generator (Steele, Lea, Flood 2014).
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and an ordered list of tags.
///
/// The derivation folds each tag through splitmix64, so
/// `derive_seed(s, &[a, b])` depends on the order and values of `a, b`
/// but on nothing else.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag.wrapping_add(0x51ed_270b)));
    }
    state
}

/// Seeded ChaCha stream used for every stochastic generator in the crate.
pub fn seeded_rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

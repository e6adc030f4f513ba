//! Deterministic random-number streams.
//!
//! Every stochastic step in the crate draws from a [`Prng`] derived from a
//! user-visible 64-bit master seed plus a fixed integer path (replicate
//! index, pipeline stage, imputation copy, ...).  Deriving independent
//! streams by path instead of sharing one sequential generator is what makes
//! results byte-identical at any parallelism degree: workers never contend
//! for draws, and merging results in index order reproduces the single-thread
//! output exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// The generator used throughout the crate.
pub type Prng = ChaCha12Rng;

/// SplitMix64 step: advances `state` and returns a well-mixed 64-bit value.
///
/// Used only for key derivation, never as the simulation generator itself.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator from `seed` and an integer `path`.
///
/// The 256-bit ChaCha key is built by absorbing the seed and every path
/// component through SplitMix64, so distinct paths give unrelated streams
/// while identical `(seed, path)` pairs always reproduce the same draws.
pub fn derive_rng(seed: u64, path: &[u64]) -> Prng {
    let mut state = seed ^ 0xd27d_4b5e_6e1a_37f3;
    splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    Prng::from_seed(key)
}

/// Stage labels for the per-replicate stream paths used by the simulation
/// harness and pipelines.  Kept in one place so callers cannot collide.
pub mod stage {
    /// Cohort generation within a replicate.
    pub const GENERATE: u64 = 1;
    /// Phase-two and supersample draws.
    pub const SAMPLE: u64 = 2;
    /// Imputation (one sub-stream per copy is derived below this).
    pub const IMPUTE: u64 = 3;
    /// Baseline intercept calibration (shared across replicates).
    pub const CALIBRATE_BASELINE: u64 = 4;
}

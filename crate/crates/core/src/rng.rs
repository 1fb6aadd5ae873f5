//! Seed derivation for per-request generator streams.
//!
//! Every rollout request owns its own `ChaCha8Rng`, seeded from the run
//! seed plus a stream of identifying integers (step, prompt, sample,
//! purpose). This keeps requests independent of engine iteration order and
//! makes whole simulations replayable from a single seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags distinguishing the independent generator families of a run.
pub mod purpose {
    /// Main rollout decoding for the current batch.
    pub const MAIN: u64 = 1;
    /// Next-batch pre-generation inside bubbles.
    pub const PREGEN: u64 = 2;
    /// Synthetic prompt token synthesis.
    pub const PROMPT: u64 = 3;
}

/// SplitMix64 finalizer; a stable 64-bit mixer independent of `std`'s
/// hasher randomization.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a stream of identifiers into a single derived seed.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &part in stream {
        state = splitmix64(state ^ splitmix64(part.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    state
}

/// A request-local generator for the given identifier stream.
pub fn request_rng(base: u64, stream: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

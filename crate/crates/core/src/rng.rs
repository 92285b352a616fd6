//! Deterministic stream derivation for parallel Monte Carlo.
//!
//! Every random draw in the crate flows from a single master seed through
//! named substreams keyed by integer ids (iteration, block, unit index).
//! A substream is a ChaCha generator keyed by a hash of the master seed and
//! the id path, so draws are independent of thread scheduling: the worker
//! that handles unit `i` always sees the same stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named top-level substreams, kept distinct so e.g. `fit` and `predict`
/// never consume from the same stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Fit = 1,
    Simulate = 2,
    Split = 3,
    Predict = 4,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive a generator from the master seed and an id path.
pub fn substream(seed: u64, stream: Stream, ids: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6a09e667f3bcc908;
    let mut mix = splitmix64(&mut state) ^ (stream as u64).wrapping_mul(0x9e3779b97f4a7c15);
    let mut key = [0u8; 32];
    for id in ids {
        state ^= splitmix64(&mut (mix ^ *id));
        mix = splitmix64(&mut state);
    }
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

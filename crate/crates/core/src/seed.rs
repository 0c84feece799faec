//! Deterministic seed derivation.
//!
//! Monte-Carlo sweeps need many independent RNG streams (bits, pilots,
//! channel, noise; one set per trial) that are reproducible from a single
//! root seed and stable regardless of scheduling order. `derive` hashes a
//! root seed and a path of integers (for example `[snr_index, trial, role]`)
//! into a stream seed with SplitMix64 steps. Not cryptographic.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a stream seed from a root seed and a path of counters.
pub fn derive(root: u64, path: &[u64]) -> u64 {
    let mut s = splitmix(root);
    for (i, &p) in path.iter().enumerate() {
        s = splitmix(s ^ splitmix(p.wrapping_add((i as u64) << 32)));
    }
    s
}

/// ChaCha stream seeded from `derive(root, path)`.
pub fn rng(root: u64, path: &[u64]) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive(root, path))
}

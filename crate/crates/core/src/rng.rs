//! Seed derivation for independent, order-free random streams.
//!
//! Every stochastic step draws from a stream identified by a tuple of
//! integers (seed, round, candidate, ...). Streams are derived by hashing the
//! tuple, so any subset of them can be generated in any order (or in
//! parallel) without changing what each one produces.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every stream in the crate.
pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of stream coordinates into a single 64-bit seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// A generator for the stream at `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, path))
}

/// The stream a decoding candidate uses for one extension round.
///
/// Token-wise generation uses round 0, candidate 0; best-of-N sample `i` uses
/// round 0, candidate `i`; beam search uses its round and flat candidate index.
pub fn candidate_stream(seed: u64, round: usize, candidate: usize) -> StreamRng {
    stream(seed, &[0xC4A2_u64, round as u64, candidate as u64])
}

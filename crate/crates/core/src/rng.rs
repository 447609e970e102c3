//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a stream identified by the
//! run seed plus a tuple of counters (epoch, step, sample, ...). A stream
//! depends only on its key, never on how many draws other streams made, so
//! serial and parallel execution see identical numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Keeps streams with equal counters apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    View = 3,
    Synthesis = 4,
    Probe = 5,
    Data = 6,
    Split = 7,
    Derive = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a seed and a counter tuple into a single 64-bit key.
pub fn mix_key(seed: u64, purpose: Purpose, counters: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(purpose as u64));
    for &c in counters {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

/// Opens the stream for `(seed, purpose, counters)`.
pub fn stream(seed: u64, purpose: Purpose, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_key(seed, purpose, counters))
}

/// Derives an independent child seed, e.g. for model init from a run seed.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    mix_key(seed, Purpose::Derive, &[label])
}

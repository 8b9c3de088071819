//! Named, indexable random sub-streams derived from one master seed.
//!
//! Every consumer of randomness (data generation, query generation, parameter
//! init, batch shuffling, dropout) asks for its own stream by name and index,
//! so the order in which unrelated components draw numbers never matters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Deterministic sub-seed for `(master, name, index)`.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ fnv1a(name)).wrapping_add(splitmix64(index)))
}

/// A fresh generator for the named stream.
pub fn substream(master: u64, name: &str, index: u64) -> Rng {
    let mut seed = [0u8; 32];
    let mut state = derive_seed(master, name, index);
    for chunk in seed.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

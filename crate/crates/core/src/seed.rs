//! Keyed random streams.
//!
//! Every stochastic step draws from a generator keyed on the master seed
//! plus a tuple of integers naming the step, so runs are reproducible and
//! independent streams never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stable 64-bit FNV-1a hash, for keying streams on names.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn keyed_rng(seed: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, keys))
}

/// Stream tags, so that e.g. head initialisation and batch order never
/// collide even when the other key components coincide.
pub mod stream {
    pub const ENCODER_INIT: u64 = 1;
    pub const HEAD_INIT: u64 = 2;
    pub const BATCH_ORDER: u64 = 3;
    pub const TASK_ORDER: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const QUEUE_INIT: u64 = 6;
    pub const POOL_SHUFFLE: u64 = 7;
    pub const BOOTSTRAP: u64 = 8;
    pub const SYNTH: u64 = 9;
    pub const PROJECTION_INIT: u64 = 10;
}

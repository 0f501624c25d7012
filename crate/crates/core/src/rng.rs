//! Seeded random streams.
//!
//! Every stochastic step draws from a ChaCha8 generator keyed by a 64-bit seed
//! and a stream id, so results never depend on how work is scheduled across
//! threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids reserved for the stages of a single replicate.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const FIT: u64 = 1;
    pub const MCDLM: u64 = 2;
    pub const BOOTSTRAP: u64 = 3;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `index` under `seed`. Distinct indices give unrelated seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

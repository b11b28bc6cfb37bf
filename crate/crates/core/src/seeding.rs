//! Deterministic random streams derived from `(seed, stream index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PinRng = ChaCha8Rng;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for one `(seed, index)` pair; draw order elsewhere never affects it.
pub fn stream(seed: u64, index: u64) -> PinRng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index.wrapping_add(0x5EED))))
}

/// Named sub-streams so unrelated consumers of one seed do not share draws.
pub mod purpose {
    pub const PHANTOM: u64 = 1 << 40;
    pub const SPLIT: u64 = 2 << 40;
    pub const INIT: u64 = 3 << 40;
    pub const SAMPLES: u64 = 4 << 40;
    pub const DROPOUT: u64 = 5 << 40;
    pub const INFERENCE: u64 = 6 << 40;
}

//! Keyed counter-based random streams.
//!
//! Every stochastic decision draws from a ChaCha stream selected by a key
//! tuple, so results never depend on the order in which work is executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into one stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// The ChaCha stream for `seed` at position `parts`.
pub fn keyed(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(parts));
    rng
}

/// Domain tags keep unrelated consumers of one seed apart.
pub mod domain {
    pub const MASK: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const DATA: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const CROP: u64 = 5;
}

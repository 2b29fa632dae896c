//! Named random sub-streams derived from one experiment seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent sub-streams of the top-level seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Sampler = 2,
    Init = 3,
    Shuffle = 4,
    Validation = 5,
    Verify = 6,
}

/// RNG for one named sub-stream of `seed`.
pub fn stream(seed: u64, s: Stream) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// RNG keyed by an arbitrary tuple of counters, e.g. (epoch, example).
pub fn keyed(seed: u64, s: Stream, a: u64, b: u64) -> Rng {
    Rng::seed_from_u64(mix(mix(mix(seed, s as u64), a), b))
}

// splitmix64 finalizer over the combined words
fn mix(x: u64, y: u64) -> u64 {
    let mut z = x ^ y.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

//! Keyed random streams.
//!
//! Every stochastic decision (mask plans, crops, flips, mixing, drop path) is
//! drawn from a ChaCha stream addressed by `(seed, key...)`, so the outcome for
//! a given image in a given epoch does not depend on batch composition or on
//! the order in which batches are built.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains, so that e.g. the crop stream and the mask stream of the
/// same image never coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Mask = 4,
    Mix = 5,
    DropPath = 6,
    Eval = 7,
    Synth = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, domain, key...)`.
pub fn keyed(seed: u64, domain: Domain, key: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed ^ 0x6d61_655f_7374_7265);
    h = splitmix64(h ^ domain as u64);
    for &k in key {
        h = splitmix64(h ^ k);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    rng.set_stream(domain as u64);
    rng
}

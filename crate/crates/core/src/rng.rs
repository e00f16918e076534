//! Named random sub-streams derived from one run seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Array2;

/// Independent consumers of randomness. Each gets its own stream so that,
/// for instance, switching the loss ablation never perturbs data order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Augment,
    Negatives,
    Shuffle,
    Teacher,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Data => 0x6461_7461,
            Stream::Init => 0x696e_6974,
            Stream::Augment => 0x6175_676d,
            Stream::Negatives => 0x6e65_6773,
            Stream::Shuffle => 0x7368_7566,
            Stream::Teacher => 0x7465_6163,
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed.wrapping_add(mix(which.tag()))))
}

/// `rows × cols` array with entries uniform in `(−1/√fan_in, 1/√fan_in)`,
/// where `fan_in = rows`.
pub fn uniform_init(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2 {
    let bound = 1.0 / (rows.max(1) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Array2::from_vec(rows, cols, data).expect("length matches shape")
}

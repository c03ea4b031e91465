//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`stream`], so a run is fully
//! determined by its top-level seed and the labels of the sub-streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for `(seed, labels...)`.
pub fn stream(seed: u64, labels: &[u64]) -> Rng {
    let mut h = mix(seed);
    for &l in labels {
        h = mix(h ^ mix(l));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Standard normal draw.
pub fn normal(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.sample(rand_distr::StandardNormal)
}

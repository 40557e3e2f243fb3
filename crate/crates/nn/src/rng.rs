//! Seeded RNG helpers. ChaCha8 keeps streams stable across platforms and
//! releases; `derive` gives independent substreams from one root seed so
//! training steps and per-image sampling stay reproducible and resumable.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of a root seed (splitmix64 mixing).
pub fn derive(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(stream)))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

pub fn standard_normal<R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<f64> {
    let mut out = ArrayD::zeros(IxDyn(shape));
    for v in out.iter_mut() {
        *v = rng.sample::<f64, _>(StandardNormal);
    }
    out
}

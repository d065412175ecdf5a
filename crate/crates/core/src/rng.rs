//! Named, seeded random streams.
//!
//! Every stage of the pipeline draws from its own stream derived from one
//! root seed and a stage name, so adding or reordering stages never shifts
//! another stage's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Seed for the stream `name` under `root`.
pub fn stream_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(root: u64, name: &str) -> Rng {
    rng_from_seed(stream_seed(root, name))
}

/// Uniform draw in `[-radius, radius]` built from one `f64` sample.
pub fn symmetric_uniform<R: rand::Rng + ?Sized>(rng: &mut R, radius: f64) -> f64 {
    let u: f64 = rng.random();
    (2.0 * u - 1.0) * radius
}

//! Seeded RNG helpers. All randomness in the harness flows through
//! explicitly seeded ChaCha streams so that runs are reproducible
//! bit-for-bit given (seed, config, precision).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Seeded = ChaCha8Rng;

pub fn seeded(seed: u64) -> Seeded {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream for a named purpose.
pub fn substream(seed: u64, label: &str) -> Seeded {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Standard normal sample via the Box–Muller transform.
pub fn normal(rng: &mut Seeded) -> f64 {
    let u1: f64 = rng.gen_range(1e-300..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

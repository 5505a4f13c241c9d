//! Seeded RNG used everywhere randomness appears (init, crops, sampling,
//! scene generation). One stream per purpose, derived from a root seed, so
//! runs are bitwise reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child stream; `tag` separates purposes
    /// ("init", "crops", ...) under the same root seed.
    pub fn child(&self, tag: &str) -> Self {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in tag.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let base = self.rng.get_seed();
        let mut lo = u64::from_le_bytes(base[0..8].try_into().unwrap());
        lo = lo.wrapping_add(h).rotate_left(17) ^ h;
        Self::new(lo)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller (deterministic consumption: 2 draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

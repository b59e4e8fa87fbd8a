//! Seeded Gaussian sampling.
//!
//! Streams are ChaCha8 keyed by an explicit 64-bit seed; normals come from
//! the Box–Muller transform. Derived seeds for independent work items are
//! produced by [`derive_seed`], so every Monte Carlo draw is a pure function
//! of its coordinates (seed, item id, sigma, draw index).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Standard-normal stream.
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Next N(0, 1) draw.
    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite
        let u1: f64 = 1.0 - self.rng.gen::<f64>();
        let u2: f64 = self.rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn fill(&mut self, out: &mut [f64], sigma: f64) {
        for v in out {
            *v = sigma * self.next();
        }
    }
}

/// `count` i.i.d. N(0, sigma²) draws; the shape is the caller's concern.
pub fn sample_gaussian(count: usize, sigma: f64, seed: u64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::arg(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut out = vec![0.0; count];
    if sigma > 0.0 {
        GaussianStream::new(seed).fill(&mut out, sigma);
    }
    Ok(out)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of 64-bit words into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5EED_0F_E3B5_u64, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for one noise draw, keyed by sigma's value rather than its grid index.
pub fn noise_seed(seed: u64, item: u64, sigma: f64, draw: u64) -> u64 {
    derive_seed(&[seed, item, sigma.to_bits(), draw])
}

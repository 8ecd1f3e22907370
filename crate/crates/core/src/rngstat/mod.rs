//! Shared numerical primitives: counter-based RNG streams, normal
//! CDF/quantile routines, and fixed-order reduction helpers.
//!
//! Reproducibility contract: every random draw in this crate is a pure
//! function of a stream key `(base seed, replication id, purpose tag)`.
//! Normal variates are produced by applying the inverse CDF to the
//! stream's uniforms, so the entire simulation is a deterministic
//! function of stream keys on any platform with IEEE-754 doubles.

mod normal;

pub use normal::{erf, erfc, normal_cdf, normal_inverse_cdf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// A splittable random stream: ChaCha8 keyed by a 256-bit hash of
/// `(base seed, replication id, purpose tag)`.
///
/// ChaCha is a counter-based generator, so stream creation is O(1) and
/// two streams with different keys are statistically independent.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(base_seed: u64, replication: u64, tag: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(base_seed.to_le_bytes());
        hasher.update(replication.to_le_bytes());
        hasher.update(tag.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        RngStream {
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw on the half-open interval `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Standard normal draw via the inverse CDF applied to an
    /// open-interval uniform (the half-bit offset keeps the uniform in
    /// `(0, 1)` so the quantile is always finite).
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        let u = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
        normal::normal_inverse_cdf_unchecked(u)
    }

    /// Bernoulli draw with success probability `p`.
    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// The purpose-separated streams consumed by one simulated trial.
///
/// Covariate, noise, and assignment draws come from distinct streams so
/// that switching the randomization scheme (or the number of regressors
/// used) never perturbs the drawn potential outcomes.
pub struct TrialRngs {
    pub covariates: RngStream,
    pub noise: RngStream,
    pub assignment: RngStream,
}

impl TrialRngs {
    pub fn new(base_seed: u64, replication: u64) -> Self {
        TrialRngs {
            covariates: RngStream::new(base_seed, replication, "covariates"),
            noise: RngStream::new(base_seed, replication, "noise"),
            assignment: RngStream::new(base_seed, replication, "assignment"),
        }
    }
}

/// Left-to-right sum. All statistically meaningful reductions in this
/// crate go through these helpers so that results are independent of
/// worker count.
#[inline]
pub fn fixed_sum(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, &x| acc + x)
}

#[inline]
pub fn fixed_mean(xs: &[f64]) -> f64 {
    fixed_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator), fixed order.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = fixed_mean(xs);
    let ss = xs.iter().fold(0.0, |acc, &x| acc + (x - m) * (x - m));
    (ss / (n - 1) as f64).sqrt()
}

//! Portable seeded randomness for workload generation.
//!
//! The generator is xoshiro256** seeded through SplitMix64
//! (`seed_from_u64`). Sampling is fixed here rather than delegated so that
//! traces reproduce across library versions:
//!
//! - unit: `(next_u64() >> 11) * 2^-53`, uniform on [0, 1)
//! - exponential(rate): `-ln(1 - u) / rate`
//! - log-uniform [lo, hi]: `exp(ln lo + u * (ln hi - ln lo))`
//! - weighted choice: first index whose running weight sum exceeds `u * sum`

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

#[derive(Debug, Clone)]
pub struct SimRng(Xoshiro256StarStar);

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng(Xoshiro256StarStar::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.unit() * (hi - lo)
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.unit()).ln() / rate
    }

    pub fn log_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        (lo.ln() + self.unit() * (hi.ln() - lo.ln())).exp()
    }

    /// Index drawn in proportion to `weights`; all weights must be
    /// non-negative with a positive sum.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let sum: f64 = weights.iter().sum();
        let target = self.unit() * sum;
        let mut acc = 0.0;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if target < acc {
                return i;
            }
        }
        weights.len() - 1
    }
}

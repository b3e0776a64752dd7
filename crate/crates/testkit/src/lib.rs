//! Independent reference implementations for tests.
//!
//! Everything here is written from the definitions with plain loops and
//! shares no code with `nisp-core` beyond its data types.

pub mod criteria;
pub mod gen;
pub mod gradcheck;
pub mod oracles;
pub mod refops;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// One pass/fail line of a check that has a measured value and a bound.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Outcome { name: name.into(), pass, detail: detail.into() }
    }

    pub fn line(&self) -> String {
        format!("{} {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

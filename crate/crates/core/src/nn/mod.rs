//! Small reverse-mode autodiff engine with the layers and losses the network needs.

mod kernels;
pub mod params;
pub mod tape;
mod tensor;
pub mod weights;

pub use params::{Bound, Param, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::Result;

/// Triangular soft-histogram weights of one value: `(lower bin, weight of lower, weight of upper)`.
pub fn soft_bin_weights(v: f32) -> (usize, f64, f64) {
    let (k, frac, _) = kernels::soft_bin(v);
    (k, 1.0 - frac, frac)
}

pub const HIST_BINS: usize = kernels::SOFT_BINS;

/// He-uniform initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let shape = shape.into();
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("size matches")
}

/// Sum of already computed loss terms.
pub fn total_loss(tape: &Tape, components: &[Var]) -> Result<Var> {
    tape.sum(components)
}

//! Minimal f64 layer toolkit with explicit forward/backward passes.
//!
//! Everything runs single-threaded on the CPU; GEMMs go through BLAS.
//! Layers accumulate parameter gradients internally and return input
//! gradients from `backward`.

mod adam;
mod conv;
mod linear;
mod norm;
pub mod ops;

pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// A named parameter with its gradient buffer, for the optimizer.
pub struct TrainableMut<'a> {
    pub name: String,
    pub value: ndarray::ArrayViewMutD<'a, f64>,
    pub grad: ndarray::ArrayViewMutD<'a, f64>,
}

/// Fan-in-scaled uniform init: U(-L, L) with L = sqrt(3 / fan_in),
/// giving an empirical std of 1 / sqrt(fan_in).
pub fn fan_in_uniform(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let limit = (3.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(shape.to_vec(), || rng.gen_range(-limit..limit))
}

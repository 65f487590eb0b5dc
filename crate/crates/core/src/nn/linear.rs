use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha20Rng;

use super::fan_in_uniform;

/// Fully connected layer: y = x W^T + b.
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// (out_dim, in_dim)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha20Rng) -> Self {
        let w = fan_in_uniform(rng, &[out_dim, in_dim], in_dim)
            .into_dimensionality()
            .expect("2d");
        Self {
            in_dim,
            out_dim,
            w,
            b: Array1::zeros(out_dim),
            gw: Array2::zeros((out_dim, in_dim)),
            gb: Array1::zeros(out_dim),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.b;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, gy: &Array2<f64>) -> Array2<f64> {
        self.gw += &gy.t().dot(x);
        self.gb += &gy.sum_axis(Axis(0));
        gy.dot(&self.w)
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

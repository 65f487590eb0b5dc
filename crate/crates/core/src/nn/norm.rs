use ndarray::{Array1, Array4, Axis};

/// Batch normalization over (N, H, W) per channel. Batch statistics in
/// training, running averages (momentum 0.9) at inference.
pub struct BatchNorm2d {
    pub ch: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub ggamma: Array1<f64>,
    pub gbeta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Saved intermediates for the backward pass.
pub struct BnCache {
    pub xhat: Array4<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(ch: usize) -> Self {
        Self {
            ch,
            momentum: 0.9,
            eps: 1e-5,
            gamma: Array1::ones(ch),
            beta: Array1::zeros(ch),
            ggamma: Array1::zeros(ch),
            gbeta: Array1::zeros(ch),
            running_mean: Array1::zeros(ch),
            running_var: Array1::ones(ch),
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(c, self.ch);
        let count = (n * h * w) as f64;
        let mut y = Array4::zeros((n, c, h, w));
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = Array1::zeros(c);
        for ci in 0..c {
            let xc = x.index_axis(Axis(1), ci);
            let mean = xc.sum() / count;
            let var = xc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = istd;
            self.running_mean[ci] =
                self.momentum * self.running_mean[ci] + (1.0 - self.momentum) * mean;
            self.running_var[ci] =
                self.momentum * self.running_var[ci] + (1.0 - self.momentum) * var;
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            let mut yc = y.index_axis_mut(Axis(1), ci);
            let mut hc = xhat.index_axis_mut(Axis(1), ci);
            for ((dy, dh), xv) in yc.iter_mut().zip(hc.iter_mut()).zip(xc.iter()) {
                let xn = (xv - mean) * istd;
                *dh = xn;
                *dy = g * xn + b;
            }
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let mean = self.running_mean[ci];
            let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
            let (g, b) = (self.gamma[ci], self.beta[ci]);
            let xc = x.index_axis(Axis(1), ci);
            let mut yc = y.index_axis_mut(Axis(1), ci);
            for (dy, xv) in yc.iter_mut().zip(xc.iter()) {
                *dy = g * (xv - mean) * istd + b;
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = gy.dim();
        let count = (n * h * w) as f64;
        let mut gx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let gyc = gy.index_axis(Axis(1), ci);
            let hc = cache.xhat.index_axis(Axis(1), ci);
            let sum_gy: f64 = gyc.sum();
            let sum_gy_xhat: f64 = gyc.iter().zip(hc.iter()).map(|(a, b)| a * b).sum();
            self.gbeta[ci] += sum_gy;
            self.ggamma[ci] += sum_gy_xhat;
            let g = self.gamma[ci];
            let istd = cache.inv_std[ci];
            let mut gxc = gx.index_axis_mut(Axis(1), ci);
            for ((dst, gyv), xh) in gxc.iter_mut().zip(gyc.iter()).zip(hc.iter()) {
                *dst = g * istd / count * (count * gyv - sum_gy - xh * sum_gy_xhat);
            }
        }
        gx
    }

    pub fn zero_grad(&mut self) {
        self.ggamma.fill(0.0);
        self.gbeta.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand_chacha::ChaCha20Rng;

use super::fan_in_uniform;
use crate::error::{Error, Result};

/// 2D convolution with zero padding, im2col + GEMM implementation.
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    /// (out_ch, in_ch * ksize * ksize)
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha20Rng,
    ) -> Self {
        let fan_in = in_ch * ksize * ksize;
        let w = fan_in_uniform(rng, &[out_ch, fan_in], fan_in)
            .into_dimensionality()
            .expect("2d");
        Self {
            in_ch,
            out_ch,
            ksize,
            stride,
            pad,
            w,
            b: Array1::zeros(out_ch),
            gw: Array2::zeros((out_ch, fan_in)),
            gb: Array1::zeros(out_ch),
        }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h + 2 * self.pad).checked_sub(self.ksize).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.pad).checked_sub(self.ksize).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((oh, ow)),
            _ => Err(Error::DimensionMismatch(format!(
                "input {h}x{w} too small for {}x{} conv",
                self.ksize, self.ksize
            ))),
        }
    }

    fn im2col(&self, x: ArrayView2<f64>, h: usize, w: usize, oh: usize, ow: usize) -> Array2<f64> {
        // x is (in_ch, h*w) for one sample.
        let k = self.ksize;
        let mut cols = Array2::zeros((self.in_ch * k * k, oh * ow));
        for c in 0..self.in_ch {
            let plane = x.row(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            dst[oy * ow + ox] = plane[base + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        cols: ArrayView2<f64>,
        mut gx: ArrayViewMut2<f64>,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    ) {
        let k = self.ksize;
        for c in 0..self.in_ch {
            let mut plane = gx.row_mut(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = cols.row(row);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as i64 - self.pad as i64;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let base = iy as usize * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as i64 - self.pad as i64;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            plane[base + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }

    /// Forward pass on an (N, C, H, W) batch.
    pub fn forward(&self, x: &Array4<f64>) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        if c != self.in_ch {
            return Err(Error::DimensionMismatch(format!(
                "conv expects {} input channels, got {c}",
                self.in_ch
            )));
        }
        let (oh, ow) = self.out_spatial(h, w)?;
        let mut y = Array4::zeros((n, self.out_ch, oh, ow));
        for i in 0..n {
            let xi = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((c, h * w))
                .expect("reshape");
            let cols = self.im2col(xi, h, w, oh, ow);
            let mut out = self.w.dot(&cols);
            for (mut row, bias) in out.axis_iter_mut(Axis(0)).zip(&self.b) {
                row += *bias;
            }
            y.index_axis_mut(Axis(0), i)
                .into_shape_with_order((self.out_ch, oh * ow))
                .expect("reshape")
                .assign(&out);
        }
        Ok(y)
    }

    /// Backward pass: accumulates `gw`/`gb`, returns the input gradient.
    pub fn backward(&mut self, x: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (_, oc, oh, ow) = gy.dim();
        debug_assert_eq!(oc, self.out_ch);
        for i in 0..n {
            let xi = x
                .index_axis(Axis(0), i)
                .into_shape_with_order((c, h * w))
                .expect("reshape");
            let gyi = gy
                .index_axis(Axis(0), i)
                .into_shape_with_order((oc, oh * ow))
                .expect("reshape");
            let cols = self.im2col(xi, h, w, oh, ow);
            self.gw += &gyi.dot(&cols.t());
            self.gb += &gyi.sum_axis(Axis(1));
        }
        self.input_grad((n, c, h, w), gy)
    }

    /// Input gradient only; parameter gradients untouched (frozen weights).
    pub fn input_grad(&self, input_dim: (usize, usize, usize, usize), gy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = input_dim;
        let (_, oc, oh, ow) = gy.dim();
        let mut gx = Array4::zeros((n, c, h, w));
        for i in 0..n {
            let gyi = gy
                .index_axis(Axis(0), i)
                .into_shape_with_order((oc, oh * ow))
                .expect("reshape");
            let gcols = self.w.t().dot(&gyi);
            let gxi = gx
                .index_axis_mut(Axis(0), i)
                .into_shape_with_order((c, h * w))
                .expect("reshape");
            self.col2im(gcols.view(), gxi, h, w, oh, ow);
        }
        gx
    }

    pub fn zero_grad(&mut self) {
        self.gw.fill(0.0);
        self.gb.fill(0.0);
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};

    /// Convolution-by-definition reference.
    fn conv_oracle(conv: &Conv2d, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = conv.out_spatial(h, w).unwrap();
        let k = conv.ksize;
        let mut y = Array4::zeros((n, conv.out_ch, oh, ow));
        for i in 0..n {
            for oc in 0..conv.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.b[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as i64 - conv.pad as i64;
                                    let ix = (ox * conv.stride + kx) as i64 - conv.pad as i64;
                                    if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w {
                                        continue;
                                    }
                                    acc += conv.w[[oc, (ic * k + ky) * k + kx]]
                                        * x[[i, ic, iy as usize, ix as usize]];
                                }
                            }
                        }
                        y[[i, oc, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_definition() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 4, 9)] {
            let mut conv = Conv2d::new(2, 3, k, stride, pad, &mut rng);
            for v in conv.b.iter_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
            let x = Array4::from_shape_fn((2, 2, 8, 6), |_| rng.gen_range(-1.0..1.0));
            let y = conv.forward(&x).unwrap();
            let want = conv_oracle(&conv, &x);
            for (a, b) in y.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10, "stride {stride} k {k}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 2, 3, 1, 1, &mut rng);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let gy = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.gen_range(-1.0..1.0));

        conv.zero_grad();
        let gx = conv.backward(&x, &gy);

        let loss = |conv: &Conv2d, x: &Array4<f64>| -> f64 {
            conv.forward(x).unwrap().iter().zip(gy.iter()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        // input gradient
        for &(i, c, y_, x_) in &[(0usize, 0usize, 0usize, 0usize), (0, 1, 2, 3), (0, 0, 4, 4)] {
            let mut xp = x.clone();
            xp[[i, c, y_, x_]] += h;
            let mut xm = x.clone();
            xm[[i, c, y_, x_]] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - gx[[i, c, y_, x_]]).abs() < 1e-6);
        }
        // weight gradient
        for &(o, f) in &[(0usize, 0usize), (1, 17), (1, 5)] {
            let mut cp = conv.w.clone();
            cp[[o, f]] += h;
            let mut cm = conv.w.clone();
            cm[[o, f]] -= h;
            let orig = conv.w.clone();
            conv.w = cp;
            let lp = loss(&conv, &x);
            conv.w = cm;
            let lm = loss(&conv, &x);
            conv.w = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - conv.gw[[o, f]]).abs() < 1e-6);
        }
    }

    #[test]
    fn backward_input_leaves_param_grads_untouched() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(4);
        let conv = Conv2d::new(1, 1, 3, 1, 1, &mut rng);
        let gy = Array4::ones((1, 1, 4, 4));
        let _ = conv.input_grad((1, 1, 4, 4), &gy);
        assert!(conv.gw.iter().all(|v| *v == 0.0));
        assert!(conv.gb.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_std_matches_fan_in_formula() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let conv = Conv2d::new(16, 64, 3, 1, 1, &mut rng);
        assert!(conv.w.len() >= 9_000);
        let n = conv.w.len() as f64;
        let mean = conv.w.sum() / n;
        let var = conv.w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let expect = 1.0 / ((16 * 9) as f64).sqrt();
        assert!((std - expect).abs() / expect < 0.1, "std {std} vs {expect}");
    }
}

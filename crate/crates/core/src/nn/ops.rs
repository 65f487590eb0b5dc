//! Parameter-free layer operations and their backward passes.

use ndarray::{Array2, Array4};

pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Backward through ReLU given the forward *output*.
pub fn relu_backward(y: &Array4<f64>, gy: &Array4<f64>) -> Array4<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(y, |g, v| {
        if *v <= 0.0 {
            *g = 0.0;
        }
    });
    gx
}

pub fn leaky_relu(x: &Array4<f64>, slope: f64) -> Array4<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

/// Backward through LeakyReLU given the forward *input*.
pub fn leaky_relu_backward(x: &Array4<f64>, gy: &Array4<f64>, slope: f64) -> Array4<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, v| {
        if *v < 0.0 {
            *g *= slope;
        }
    });
    gx
}

pub fn leaky_relu_2d(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v >= 0.0 { v } else { slope * v })
}

pub fn leaky_relu_2d_backward(x: &Array2<f64>, gy: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut gx = gy.clone();
    gx.zip_mut_with(x, |g, v| {
        if *v < 0.0 {
            *g *= slope;
        }
    });
    gx
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Depth-to-space: (N, C*r^2, H, W) -> (N, C, H*r, W*r).
pub fn pixel_shuffle(x: &Array4<f64>, r: usize) -> Array4<f64> {
    let (n, c_in, h, w) = x.dim();
    debug_assert_eq!(c_in % (r * r), 0);
    let c = c_in / (r * r);
    let mut y = Array4::zeros((n, c, h * r, w * r));
    for i in 0..n {
        for oc in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = oc * r * r + dy * r + dx;
                    for yy in 0..h {
                        for xx in 0..w {
                            y[[i, oc, yy * r + dy, xx * r + dx]] = x[[i, ic, yy, xx]];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Inverse rearrangement: gradient of `pixel_shuffle`.
pub fn pixel_shuffle_backward(gy: &Array4<f64>, r: usize) -> Array4<f64> {
    let (n, c, hr, wr) = gy.dim();
    let (h, w) = (hr / r, wr / r);
    let mut gx = Array4::zeros((n, c * r * r, h, w));
    for i in 0..n {
        for oc in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = oc * r * r + dy * r + dx;
                    for yy in 0..h {
                        for xx in 0..w {
                            gx[[i, ic, yy, xx]] = gy[[i, oc, yy * r + dy, xx * r + dx]];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// 2x2 stride-2 max pooling with ceil-mode output size; the last window
/// may be partial. Returns the output and flat argmax indices.
pub fn maxpool2(x: &Array4<f64>) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut arg = vec![0usize; n * c * oh * ow];
    let mut k = 0;
    for i in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for yy in (oy * 2)..((oy * 2 + 2).min(h)) {
                        for xx in (ox * 2)..((ox * 2 + 2).min(w)) {
                            let v = x[[i, ci, yy, xx]];
                            if v > best {
                                best = v;
                                best_idx = ((i * c + ci) * h + yy) * w + xx;
                            }
                        }
                    }
                    y[[i, ci, oy, ox]] = best;
                    arg[k] = best_idx;
                    k += 1;
                }
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward(
    input_dim: (usize, usize, usize, usize),
    arg: &[usize],
    gy: &Array4<f64>,
) -> Array4<f64> {
    let mut gx = Array4::zeros(input_dim);
    let flat = gx.as_slice_mut().expect("contiguous");
    for (g, &idx) in gy.iter().zip(arg.iter()) {
        flat[idx] += *g;
    }
    gx
}

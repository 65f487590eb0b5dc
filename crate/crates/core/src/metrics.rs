//! PSNR/SSIM under an explicit convention (color space, border shave),
//! region-scoped scoring, and inference throughput measurement.

use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::networks::Generator;
use crate::obb::MaskSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    #[default]
    Rgb,
    Luma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConvention {
    pub color: ColorMode,
    pub border_shave: usize,
    pub range: f64,
}

impl Default for MetricConvention {
    fn default() -> Self {
        Self {
            color: ColorMode::Rgb,
            border_shave: 4,
            range: 1.0,
        }
    }
}

/// Shaved, convention-converted planes: (H', W', C') with C' = 3 or 1.
fn prepare(img: &ImageTensor, conv: &MetricConvention) -> Result<Array3<f64>> {
    let (h, w) = (img.height(), img.width());
    let s = conv.border_shave;
    if 2 * s >= h || 2 * s >= w {
        return Err(Error::InvalidArgument(format!(
            "shave {s} leaves no pixels in a {h}x{w} image"
        )));
    }
    let out = match conv.color {
        ColorMode::Rgb => img
            .data()
            .slice(ndarray::s![s..h - s, s..w - s, ..])
            .to_owned(),
        ColorMode::Luma => {
            let y = img.to_luma();
            let cropped = y.slice(ndarray::s![s..h - s, s..w - s]).to_owned();
            let (ch, cw) = cropped.dim();
            cropped.into_shape_with_order((ch, cw, 1)).expect("reshape")
        }
    };
    Ok(out)
}

fn check_same_dims(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * ((range * range) / mse).log10()
    }
}

/// Peak signal-to-noise ratio in dB; identical inputs give +inf.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, conv: &MetricConvention) -> Result<f64> {
    check_same_dims(a, b)?;
    let pa = prepare(a, conv)?;
    let pb = prepare(b, conv)?;
    let mse = pa
        .iter()
        .zip(pb.iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / pa.len() as f64;
    Ok(psnr_from_mse(mse, conv.range))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> Array2<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = Array2::from_shape_fn((SSIM_WINDOW, SSIM_WINDOW), |(y, x)| {
        let dy = y as f64 - c;
        let dx = x as f64 - c;
        (-(dy * dy + dx * dx) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let sum = w.sum();
    w.mapv_inplace(|v| v / sum);
    w
}

fn ssim_plane(a: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>, range: f64) -> f64 {
    let (h, w) = a.dim();
    let win = gaussian_window();
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wv = win[[ky, kx]];
                    let av = a[[oy + ky, ox + kx]];
                    let bv = b[[oy + ky, ox + kx]];
                    mu_a += wv * av;
                    mu_b += wv * bv;
                    aa += wv * av * av;
                    bb += wv * bv * bv;
                    ab += wv * av * bv;
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    acc / (oh * ow) as f64
}

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5) over the shaved,
/// convention-converted image; channels averaged in RGB mode.
pub fn ssim(a: &ImageTensor, b: &ImageTensor, conv: &MetricConvention) -> Result<f64> {
    check_same_dims(a, b)?;
    let pa = prepare(a, conv)?;
    let pb = prepare(b, conv)?;
    let (h, w, c) = pa.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::DimensionMismatch(format!(
            "shaved image {h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let mut total = 0.0;
    for ch in 0..c {
        total += ssim_plane(
            pa.index_axis(ndarray::Axis(2), ch),
            pb.index_axis(ndarray::Axis(2), ch),
            conv.range,
        );
    }
    Ok(total / c as f64)
}

/// Per-region PSNR; a region with no pixels after the shave is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionScores {
    pub object: Option<f64>,
    pub background: Option<f64>,
    pub boundary: Option<f64>,
}

pub fn region_scores(
    sr: &ImageTensor,
    hr: &ImageTensor,
    masks: &MaskSet,
    conv: &MetricConvention,
) -> Result<RegionScores> {
    check_same_dims(sr, hr)?;
    if masks.height() != sr.height() || masks.width() != sr.width() {
        return Err(Error::DimensionMismatch(format!(
            "masks {}x{} vs image {}x{}",
            masks.height(),
            masks.width(),
            sr.height(),
            sr.width()
        )));
    }
    if !masks.is_partition() {
        return Err(Error::InvalidArgument(
            "mask set is not a one-hot partition".into(),
        ));
    }
    let pa = prepare(sr, conv)?;
    let pb = prepare(hr, conv)?;
    let s = conv.border_shave;
    let score = |mask: &Array2<f64>| -> Option<f64> {
        let (h, w, c) = pa.dim();
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if mask[[y + s, x + s]] == 0.0 {
                    continue;
                }
                for ch in 0..c {
                    let d = pa[[y, x, ch]] - pb[[y, x, ch]];
                    sum += d * d;
                }
                count += c;
            }
        }
        (count > 0).then(|| psnr_from_mse(sum / count as f64, conv.range))
    };
    Ok(RegionScores {
        object: score(&masks.object),
        background: score(&masks.background),
        boundary: score(&masks.boundary),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub fps_median: f64,
    pub fps_mean: f64,
    pub latency_ms_p50: f64,
    pub input_size: [usize; 2],
    pub warmup: usize,
    pub repeats: usize,
}

/// Times `repeats` inference passes at the given LR input size after
/// `warmup` untimed passes.
pub fn benchmark_throughput(
    generator: &Generator,
    input_size: (usize, usize),
    warmup: usize,
    repeats: usize,
) -> Result<BenchReport> {
    if repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be positive".into()));
    }
    let (h, w) = input_size;
    // fixed, cheap test pattern; content does not affect timing
    let x = Array4::from_shape_fn((1, 3, h, w), |(_, c, y, xx)| {
        ((y + xx + c) % 7) as f64 / 7.0
    });
    for _ in 0..warmup {
        generator.forward_eval(&x)?;
    }
    let mut latencies = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        generator.forward_eval(&x)?;
        latencies.push(t0.elapsed().as_secs_f64());
    }
    let mut fps: Vec<f64> = latencies.iter().map(|l| 1.0 / l).collect();
    fps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut lat_sorted = latencies.clone();
    lat_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = |v: &[f64]| {
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    Ok(BenchReport {
        fps_median: median(&fps),
        fps_mean: fps.iter().sum::<f64>() / repeats as f64,
        latency_ms_p50: median(&lat_sorted) * 1e3,
        input_size: [h, w],
        warmup,
        repeats,
    })
}

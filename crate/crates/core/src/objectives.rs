//! Loss terms: pixel-wise MSE, adversarial losses, and the region-masked
//! perceptual loss. Masking happens in image space *before* feature
//! extraction, so changes outside a term's mask cannot affect that term.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureTap};
use crate::obb::MaskSet;

/// Probability clamp inside log terms.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the total generator objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    /// boundary perceptual term (tap relu2_2)
    pub alpha: f64,
    /// background perceptual term (tap relu4_3)
    pub beta: f64,
    /// object perceptual term; zero in the reference configuration
    pub gamma: f64,
    pub w_mse: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 2e-6,
            beta: 1.5e-6,
            gamma: 0.0,
            w_mse: 1.0,
            w_adv: 1e-3,
        }
    }
}

/// Per-batch scalar loss components. `total` is always recomputed from
/// the components with the same arithmetic, so the sum identity is exact.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
pub struct LossReport {
    pub total: f64,
    pub mse: f64,
    pub adv_g: f64,
    pub perc_boundary: f64,
    pub perc_background: f64,
}

impl LossReport {
    pub fn compose(w: &LossWeights, mse: f64, adv_g: f64, perc_boundary: f64, perc_background: f64) -> Self {
        Self {
            total: w.w_mse * mse + w.w_adv * adv_g + w.alpha * perc_boundary + w.beta * perc_background,
            mse,
            adv_g,
            perc_boundary,
            perc_background,
        }
    }
}

fn check_dims(a: &Array3<f64>, b: &Array3<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Mean over all pixels and channels of the squared difference.
pub fn pixel_mse(sr: &Array3<f64>, hr: &Array3<f64>) -> Result<f64> {
    check_dims(sr, hr)?;
    let n = sr.len() as f64;
    Ok(sr
        .iter()
        .zip(hr.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / n)
}

/// MSE and its gradient with respect to `sr`.
pub fn pixel_mse_grad(sr: &Array3<f64>, hr: &Array3<f64>) -> Result<(f64, Array3<f64>)> {
    check_dims(sr, hr)?;
    let n = sr.len() as f64;
    let mut grad = Array3::zeros(sr.dim());
    let mut loss = 0.0;
    for ((g, a), b) in grad.iter_mut().zip(sr.iter()).zip(hr.iter()) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

fn apply_mask(img: &Array3<f64>, mask: &ndarray::Array2<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| img[[y, x, ch]] * mask[[y, x]])
}

/// Mean squared feature distance between the two mask-multiplied images
/// at the given tap.
pub fn masked_feature_distance(
    fx: &FeatureExtractor,
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    mask: &ndarray::Array2<f64>,
    tap: FeatureTap,
) -> Result<f64> {
    Ok(masked_feature_distance_grad(fx, sr, hr, mask, tap, false)?.0)
}

/// As `masked_feature_distance`; optionally also returns d(loss)/d(sr).
pub fn masked_feature_distance_grad(
    fx: &FeatureExtractor,
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    mask: &ndarray::Array2<f64>,
    tap: FeatureTap,
    with_grad: bool,
) -> Result<(f64, Option<Array3<f64>>)> {
    check_dims(sr, hr)?;
    if mask.dim() != (sr.dim().0, sr.dim().1) {
        return Err(Error::DimensionMismatch(format!(
            "mask {:?} vs image {:?}",
            mask.dim(),
            sr.dim()
        )));
    }
    let sr_masked = apply_mask(sr, mask);
    let hr_masked = apply_mask(hr, mask);
    let (f_sr, cache) = fx.extract_cached(&sr_masked, tap)?;
    let (f_hr, _) = fx.extract_cached(&hr_masked, tap)?;

    let n = f_sr.len() as f64;
    let mut loss = 0.0;
    let mut gfeat = Array3::zeros(f_sr.dim());
    for ((g, a), b) in gfeat.iter_mut().zip(f_sr.iter()).zip(f_hr.iter()) {
        let d = a - b;
        loss += d * d;
        *g = 2.0 * d / n;
    }
    loss /= n;

    let grad = if with_grad {
        let g_img = fx.input_gradient(&cache, &gfeat);
        // masking precedes extraction, so the chain rule re-applies the mask
        Some(apply_mask(&g_img, mask))
    } else {
        None
    };
    Ok((loss, grad))
}

/// The two perceptual components (the object term is weighted to zero and
/// never evaluated).
#[derive(Debug, Clone, Copy, Default)]
pub struct PerceptualComponents {
    pub boundary: f64,
    pub background: f64,
}

fn check_partition(masks: &MaskSet) -> Result<()> {
    if !masks.is_partition() {
        return Err(Error::InvalidArgument(
            "mask set is not a one-hot partition".into(),
        ));
    }
    Ok(())
}

/// Region-targeted perceptual loss:
/// alpha * d(relu2_2, boundary mask) + beta * d(relu4_3, background mask).
pub fn targeted_perceptual_loss(
    fx: &FeatureExtractor,
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    masks: &MaskSet,
    w: &LossWeights,
) -> Result<(f64, PerceptualComponents)> {
    let (loss, comps, _) = targeted_perceptual_loss_grad(fx, sr, hr, masks, w, false)?;
    Ok((loss, comps))
}

pub fn targeted_perceptual_loss_grad(
    fx: &FeatureExtractor,
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    masks: &MaskSet,
    w: &LossWeights,
    with_grad: bool,
) -> Result<(f64, PerceptualComponents, Option<Array3<f64>>)> {
    check_partition(masks)?;
    if masks.height() != sr.dim().0 || masks.width() != sr.dim().1 {
        return Err(Error::DimensionMismatch(format!(
            "masks {}x{} vs image {:?}",
            masks.height(),
            masks.width(),
            sr.dim()
        )));
    }
    let (boundary, g_boundary) =
        masked_feature_distance_grad(fx, sr, hr, &masks.boundary, FeatureTap::Relu2_2, with_grad)?;
    let (background, g_background) =
        masked_feature_distance_grad(fx, sr, hr, &masks.background, FeatureTap::Relu4_3, with_grad)?;
    let comps = PerceptualComponents {
        boundary,
        background,
    };
    let loss = w.alpha * boundary + w.beta * background;
    let grad = if with_grad {
        let mut g = g_boundary.expect("grad requested");
        let gb = g_background.expect("grad requested");
        g.zip_mut_with(&gb, |a, b| *a = w.alpha * *a + w.beta * *b);
        Some(g)
    } else {
        None
    };
    Ok((loss, comps, grad))
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Non-saturating generator adversarial loss: mean of -log D(fake).
pub fn adversarial_g(d_out_fake: &[f64]) -> f64 {
    let n = d_out_fake.len() as f64;
    d_out_fake.iter().map(|p| -clamp_prob(*p).ln()).sum::<f64>() / n
}

/// Discriminator loss: mean of -log D(real) - log(1 - D(fake)).
pub fn adversarial_d(d_out_real: &[f64], d_out_fake: &[f64]) -> f64 {
    let n = d_out_real.len() as f64;
    let real: f64 = d_out_real.iter().map(|p| -clamp_prob(*p).ln()).sum();
    let fake: f64 = d_out_fake.iter().map(|p| -(1.0 - clamp_prob(*p)).ln()).sum();
    (real + fake) / n
}

/// Total generator objective for one image, with the discriminator's fake
/// outputs supplied as given probabilities. The returned gradient covers
/// the MSE and perceptual paths (the adversarial path flows through the
/// discriminator and is composed by the trainer).
pub fn total_generator_loss(
    fx: &FeatureExtractor,
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    masks: &MaskSet,
    w: &LossWeights,
    d_out_fake: &[f64],
) -> Result<LossReport> {
    Ok(total_generator_loss_grad(fx, sr, hr, masks, w, d_out_fake, false)?.0)
}

pub fn total_generator_loss_grad(
    fx: &FeatureExtractor,
    sr: &Array3<f64>,
    hr: &Array3<f64>,
    masks: &MaskSet,
    w: &LossWeights,
    d_out_fake: &[f64],
    with_grad: bool,
) -> Result<(LossReport, Option<Array3<f64>>)> {
    let (mse, g_mse) = pixel_mse_grad(sr, hr)?;
    let (_, comps, g_perc) = targeted_perceptual_loss_grad(fx, sr, hr, masks, w, with_grad)?;
    let adv_g = adversarial_g(d_out_fake);
    let report = LossReport::compose(w, mse, adv_g, comps.boundary, comps.background);
    let grad = if with_grad {
        let mut g = g_perc.expect("grad requested");
        g.zip_mut_with(&g_mse, |a, b| *a += w.w_mse * b);
        Some(g)
    } else {
        None
    };
    Ok((report, grad))
}

//! Paired HR/LR patch cropping for training.

use ndarray::s;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::obb::OBBLabel;
use crate::resize::{resize_bicubic, ResizeSpec};

pub const HR_PATCH: usize = 96;
pub const SCALE: usize = 4;
pub const LR_PATCH: usize = HR_PATCH / SCALE;

/// A training pair: 96x96 HR crop, its antialiased x1/4 LR counterpart,
/// and the identically-cropped OBB label.
#[derive(Debug, Clone)]
pub struct PatchPair {
    pub hr: ImageTensor,
    pub lr: ImageTensor,
    pub obb: OBBLabel,
}

/// Randomly crop a 96x96 HR patch aligned to a multiple-of-4 grid, derive
/// its LR counterpart and crop the OBB label identically. Deterministic
/// for a fixed RNG state.
pub fn sample_patch_pair(
    hr_image: &ImageTensor,
    obb: &OBBLabel,
    rng: &mut ChaCha20Rng,
) -> Result<PatchPair> {
    sample_patch_pair_sized(hr_image, obb, HR_PATCH, rng)
}

/// As `sample_patch_pair` with an explicit HR patch size (must be a
/// positive multiple of the scale factor).
pub fn sample_patch_pair_sized(
    hr_image: &ImageTensor,
    obb: &OBBLabel,
    patch: usize,
    rng: &mut ChaCha20Rng,
) -> Result<PatchPair> {
    if patch == 0 || patch % SCALE != 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size {patch} is not a positive multiple of {SCALE}"
        )));
    }
    let (h, w) = (hr_image.height(), hr_image.width());
    if obb.height() != h || obb.width() != w {
        return Err(Error::DimensionMismatch(format!(
            "obb {}x{} vs image {h}x{w}",
            obb.height(),
            obb.width()
        )));
    }
    if h < patch || w < patch {
        return Err(Error::PatchTooLarge {
            height: h,
            width: w,
            patch,
        });
    }
    // Offsets restricted to the multiple-of-4 grid so the crop maps onto
    // whole LR pixels.
    let max_y = (h - patch) / SCALE;
    let max_x = (w - patch) / SCALE;
    let y0 = rng.gen_range(0..=max_y) * SCALE;
    let x0 = rng.gen_range(0..=max_x) * SCALE;

    crop_pair_sized(hr_image, obb, y0, x0, patch)
}

/// Deterministic crop at an explicit grid-aligned offset.
pub fn crop_pair(
    hr_image: &ImageTensor,
    obb: &OBBLabel,
    y0: usize,
    x0: usize,
) -> Result<PatchPair> {
    crop_pair_sized(hr_image, obb, y0, x0, HR_PATCH)
}

pub fn crop_pair_sized(
    hr_image: &ImageTensor,
    obb: &OBBLabel,
    y0: usize,
    x0: usize,
    patch: usize,
) -> Result<PatchPair> {
    let hr_data = hr_image
        .data()
        .slice(s![y0..y0 + patch, x0..x0 + patch, ..])
        .to_owned();
    let hr = ImageTensor::new(hr_data)?;
    let lr = resize_bicubic(&hr, ResizeSpec::new(1.0 / SCALE as f64, true)?)?;
    let obb = obb.crop(y0, x0, patch, patch);
    Ok(PatchPair { hr, lr, obb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::SeedableRng;

    fn random_inputs(h: usize, w: usize, seed: u64) -> (ImageTensor, OBBLabel) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((h, w, 3), |_| rand::Rng::gen::<f64>(&mut rng));
        let region = Array2::from_shape_fn((h, w), |_| rand::Rng::gen_range(&mut rng, 0u8..3));
        (ImageTensor::new(data).unwrap(), OBBLabel { region })
    }

    #[test]
    fn exact_size_input_has_single_placement() {
        let (img, obb) = random_inputs(96, 96, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let pair = sample_patch_pair(&img, &obb, &mut rng).unwrap();
        assert_eq!(pair.hr.data(), img.data());
        assert_eq!(pair.obb, obb);
        assert_eq!(pair.lr.height(), LR_PATCH);
        assert_eq!(pair.lr.width(), LR_PATCH);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let (img, obb) = random_inputs(160, 128, 2);
        let mut rng1 = ChaCha20Rng::seed_from_u64(99);
        let mut rng2 = ChaCha20Rng::seed_from_u64(99);
        let a = sample_patch_pair(&img, &obb, &mut rng1).unwrap();
        let b = sample_patch_pair(&img, &obb, &mut rng2).unwrap();
        assert_eq!(a.hr.data(), b.hr.data());
        assert_eq!(a.lr.data(), b.lr.data());
        assert_eq!(a.obb, b.obb);
    }

    #[test]
    fn lr_equals_bicubic_downscale_of_hr() {
        let (img, obb) = random_inputs(128, 128, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pair = sample_patch_pair(&img, &obb, &mut rng).unwrap();
        let expect =
            resize_bicubic(&pair.hr, ResizeSpec::new(0.25, true).unwrap()).unwrap();
        assert_eq!(pair.lr.data(), expect.data());
    }

    #[test]
    fn too_small_input_rejected() {
        let (img, obb) = random_inputs(64, 64, 4);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(sample_patch_pair(&img, &obb, &mut rng).is_err());
    }

    #[test]
    fn offsets_cover_many_grid_positions() {
        let (img, obb) = random_inputs(256, 256, 6);
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..1000 {
            let pair = sample_patch_pair(&img, &obb, &mut rng).unwrap();
            // Identify the crop by its top-left pixel values.
            let key = (
                (pair.hr.data()[[0, 0, 0]] * 1e12) as i64,
                (pair.hr.data()[[0, 0, 1]] * 1e12) as i64,
            );
            seen.insert(key);
        }
        assert!(seen.len() > 50, "only {} distinct crops", seen.len());
    }
}

//! Python bindings for the super-resolution pipeline. Images cross the
//! boundary as float64 HxWx3 numpy arrays in [0, 1]; labels as uint8 HxW.

use std::collections::BTreeMap;
use std::path::PathBuf;

use numpy::{IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tpsr::features::{load_extractor, ExtractorMode, FeatureTap};
use tpsr::image::ImageTensor;
use tpsr::metrics::{self, ColorMode, MetricConvention};
use tpsr::networks::{self, load_generator};
use tpsr::obb::{
    build_obb_label, masks_from_obb, BackgroundClassSet, OBBLabel, Region, SegmentationLabel,
};
use tpsr::objectives::{targeted_perceptual_loss, LossWeights};
use tpsr::resize::{resize_raw, ResizeSpec};
use tpsr::synth::{generate_scene, SceneSpec};

fn err(e: tpsr::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_image(arr: &PyReadonlyArray3<f64>) -> PyResult<ImageTensor> {
    ImageTensor::new(arr.as_array().to_owned()).map_err(err)
}

fn obb_from_array(arr: &PyReadonlyArray2<u8>) -> PyResult<OBBLabel> {
    let region = arr.as_array().to_owned();
    if let Some(v) = region.iter().find(|v| Region::from_u8(**v).is_none()) {
        return Err(PyValueError::new_err(format!(
            "invalid region value {v}; expected 0 (object), 1 (background) or 2 (boundary)"
        )));
    }
    Ok(OBBLabel { region })
}

fn convention(color: &str, shave: usize) -> PyResult<MetricConvention> {
    let color = match color {
        "rgb" => ColorMode::Rgb,
        "luma" => ColorMode::Luma,
        other => {
            return Err(PyValueError::new_err(format!(
                "color must be 'rgb' or 'luma', got {other:?}"
            )))
        }
    };
    Ok(MetricConvention {
        color,
        border_shave: shave,
        range: 1.0,
    })
}

/// Bicubic resize with the MATLAB edge and antialiasing conventions.
#[pyfunction]
#[pyo3(signature = (img, scale, antialias = true))]
fn resize_bicubic<'py>(
    py: Python<'py>,
    img: PyReadonlyArray3<'py, f64>,
    scale: f64,
    antialias: bool,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let spec = ResizeSpec::new(scale, antialias).map_err(err)?;
    let out = resize_raw(&img.as_array().to_owned(), spec).map_err(err)?;
    Ok(out.into_pyarray(py))
}

/// Derive the 0/1/2 object/background/boundary label from a class-id map.
#[pyfunction]
#[pyo3(signature = (class_ids, class_map, bg_classes, d1 = 2.0))]
fn build_obb<'py>(
    py: Python<'py>,
    class_ids: PyReadonlyArray2<'py, u8>,
    class_map: BTreeMap<String, u8>,
    bg_classes: Vec<String>,
    d1: f64,
) -> PyResult<Bound<'py, PyArray2<u8>>> {
    let seg = SegmentationLabel {
        class_ids: class_ids.as_array().to_owned(),
        class_map,
    };
    let bg = BackgroundClassSet::new(bg_classes).map_err(err)?;
    let obb = build_obb_label(&seg, &bg, d1).map_err(err)?;
    Ok(obb.region.into_pyarray(py))
}

/// Split an OBB label into its three one-hot float masks.
#[pyfunction]
fn obb_masks<'py>(
    py: Python<'py>,
    region: PyReadonlyArray2<'py, u8>,
) -> PyResult<(
    Bound<'py, PyArray2<f64>>,
    Bound<'py, PyArray2<f64>>,
    Bound<'py, PyArray2<f64>>,
)> {
    let masks = masks_from_obb(&obb_from_array(&region)?);
    Ok((
        masks.object.into_pyarray(py),
        masks.background.into_pyarray(py),
        masks.boundary.into_pyarray(py),
    ))
}

#[pyfunction]
#[pyo3(signature = (a, b, color = "rgb", shave = 4))]
fn psnr(
    a: PyReadonlyArray3<f64>,
    b: PyReadonlyArray3<f64>,
    color: &str,
    shave: usize,
) -> PyResult<f64> {
    metrics::psnr(&to_image(&a)?, &to_image(&b)?, &convention(color, shave)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, color = "rgb", shave = 4))]
fn ssim(
    a: PyReadonlyArray3<f64>,
    b: PyReadonlyArray3<f64>,
    color: &str,
    shave: usize,
) -> PyResult<f64> {
    metrics::ssim(&to_image(&a)?, &to_image(&b)?, &convention(color, shave)?).map_err(err)
}

/// Per-region PSNR as (object, background, boundary); None where a region
/// has no pixels after border shaving.
#[pyfunction]
#[pyo3(signature = (sr, hr, region, color = "rgb", shave = 4))]
fn region_psnr(
    sr: PyReadonlyArray3<f64>,
    hr: PyReadonlyArray3<f64>,
    region: PyReadonlyArray2<u8>,
    color: &str,
    shave: usize,
) -> PyResult<(Option<f64>, Option<f64>, Option<f64>)> {
    let masks = masks_from_obb(&obb_from_array(&region)?);
    let scores = metrics::region_scores(
        &to_image(&sr)?,
        &to_image(&hr)?,
        &masks,
        &convention(color, shave)?,
    )
    .map_err(err)?;
    Ok((scores.object, scores.background, scores.boundary))
}

/// Render a synthetic scene. Returns (image, class_ids, class_map).
#[pyfunction]
#[pyo3(signature = (size = 128, seed = 0, horizon = 0.45, objects = 3))]
fn synth_scene<'py>(
    py: Python<'py>,
    size: usize,
    seed: u64,
    horizon: f64,
    objects: usize,
) -> PyResult<(
    Bound<'py, PyArray3<f64>>,
    Bound<'py, PyArray2<u8>>,
    BTreeMap<String, u8>,
)> {
    let spec = SceneSpec {
        size,
        seed,
        horizon,
        n_objects: objects,
    };
    let (img, seg) = generate_scene(&spec).map_err(err)?;
    Ok((
        img.into_data().into_pyarray(py),
        seg.class_ids.into_pyarray(py),
        seg.class_map,
    ))
}

/// Frozen surrogate feature maps at a named tap ("relu2_2" or "relu4_3").
#[pyfunction]
#[pyo3(signature = (img, tap, seed = 0))]
fn extract_features<'py>(
    py: Python<'py>,
    img: PyReadonlyArray3<'py, f64>,
    tap: &str,
    seed: u64,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let tap = FeatureTap::parse(tap).map_err(err)?;
    let fx = load_extractor(&ExtractorMode::Surrogate { seed }).map_err(err)?;
    let feat = fx.extract(&to_image(&img)?, tap).map_err(err)?;
    Ok(feat.into_pyarray(py))
}

/// Region-targeted perceptual loss of an SR/HR pair under an OBB label.
/// Returns (weighted_total, boundary_term, background_term).
#[pyfunction]
#[pyo3(signature = (sr, hr, region, alpha = 2e-6, beta = 1.5e-6, seed = 0))]
fn targeted_loss(
    sr: PyReadonlyArray3<f64>,
    hr: PyReadonlyArray3<f64>,
    region: PyReadonlyArray2<u8>,
    alpha: f64,
    beta: f64,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let masks = masks_from_obb(&obb_from_array(&region)?);
    let weights = LossWeights {
        alpha,
        beta,
        ..LossWeights::default()
    };
    let fx = load_extractor(&ExtractorMode::Surrogate { seed }).map_err(err)?;
    let (total, comps) = targeted_perceptual_loss(
        &fx,
        &sr.as_array().to_owned(),
        &hr.as_array().to_owned(),
        &masks,
        &weights,
    )
    .map_err(err)?;
    Ok((total, comps.boundary, comps.background))
}

/// Upscale an LR image x4 with a trained checkpoint.
#[pyfunction]
fn super_resolve<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    lr: PyReadonlyArray3<'py, f64>,
) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let generator = load_generator(&checkpoint).map_err(err)?;
    let sr = networks::super_resolve(&generator, &to_image(&lr)?).map_err(err)?;
    Ok(sr.into_data().into_pyarray(py))
}

#[pymodule]
fn tpsr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(resize_bicubic, m)?)?;
    m.add_function(wrap_pyfunction!(build_obb, m)?)?;
    m.add_function(wrap_pyfunction!(obb_masks, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(region_psnr, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(targeted_loss, m)?)?;
    m.add_function(wrap_pyfunction!(super_resolve, m)?)?;
    Ok(())
}

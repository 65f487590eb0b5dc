//! Deterministic synthetic scenes with pixel-exact segmentation: a sky
//! gradient above the horizon, noisy ground below, and textured shapes
//! as foreground objects. Exists so OBB, training and metric code can be
//! exercised without any external dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, ImageTensor};
use crate::obb::{build_obb_label, save_class_map, save_obb, BackgroundClassSet, SegmentationLabel};

pub const MIN_SCENE_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// square canvas edge, >= 32
    pub size: usize,
    pub seed: u64,
    /// horizon row as a fraction of the height
    pub horizon: f64,
    pub n_objects: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 128,
            seed: 0,
            horizon: 0.45,
            n_objects: 3,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SCENE_SIZE {
            return Err(Error::InvalidArgument(format!(
                "scene size {} below the minimum {MIN_SCENE_SIZE}",
                self.size
            )));
        }
        if !(0.1..=0.9).contains(&self.horizon) {
            return Err(Error::InvalidArgument(format!(
                "horizon fraction {} outside [0.1, 0.9]",
                self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// An analytic object region, center (cy, cx) with half-extents (ry, rx).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= self.ry && dx.abs() <= self.rx,
            ShapeKind::Ellipse => {
                (dy / self.ry).powi(2) + (dx / self.rx).powi(2) <= 1.0
            }
        }
    }

    fn fits(&self, size: usize) -> bool {
        self.cy - self.ry >= 0.0
            && self.cx - self.rx >= 0.0
            && self.cy + self.ry < size as f64
            && self.cx + self.rx < size as f64
    }
}

fn horizon_row(spec: &SceneSpec) -> usize {
    ((spec.size as f64 * spec.horizon).round() as usize).clamp(1, spec.size - 1)
}

/// Deterministic object placement for a spec.
pub fn place_objects(spec: &SceneSpec, rng: &mut ChaCha20Rng) -> Vec<Shape> {
    let s = spec.size as f64;
    (0..spec.n_objects)
        .map(|i| {
            let ry = rng.gen_range(s * 0.06..s * 0.16);
            let rx = rng.gen_range(s * 0.06..s * 0.16);
            let cy = rng.gen_range(ry..s - ry - 1.0);
            let cx = rng.gen_range(rx..s - rx - 1.0);
            let kind = if i % 2 == 0 {
                ShapeKind::Rectangle
            } else {
                ShapeKind::Ellipse
            };
            Shape { kind, cy, cx, ry, rx }
        })
        .collect()
}

/// Paint a scene for explicitly given shapes. Class ids: sky 0, ground 1,
/// then object{i} = 2 + i; later shapes overwrite earlier ones.
pub fn generate_scene_with_shapes(
    spec: &SceneSpec,
    shapes: &[Shape],
) -> Result<(ImageTensor, SegmentationLabel)> {
    spec.validate()?;
    for (i, shape) in shapes.iter().enumerate() {
        if !shape.fits(spec.size) {
            return Err(Error::InvalidArgument(format!(
                "object {i} does not fit the {0}x{0} canvas",
                spec.size
            )));
        }
    }
    let n = spec.size;
    let horizon = horizon_row(spec);
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e3779b97f4a7c15));

    let mut class_map = BTreeMap::new();
    class_map.insert("sky".to_string(), 0u8);
    class_map.insert("ground".to_string(), 1u8);
    for i in 0..shapes.len() {
        class_map.insert(format!("object{i}"), 2 + i as u8);
    }

    let mut img = Array3::zeros((n, n, 3));
    let mut ids = Array2::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            if y < horizon {
                // smooth sky gradient
                let t = y as f64 / horizon as f64;
                img[[y, x, 0]] = 0.35 + 0.25 * t;
                img[[y, x, 1]] = 0.55 + 0.2 * t;
                img[[y, x, 2]] = 0.85 - 0.1 * t;
                ids[[y, x]] = 0;
            } else {
                // high-frequency ground noise
                img[[y, x, 0]] = 0.35 + 0.25 * rng.gen::<f64>();
                img[[y, x, 1]] = 0.25 + 0.2 * rng.gen::<f64>();
                img[[y, x, 2]] = 0.1 + 0.15 * rng.gen::<f64>();
                ids[[y, x]] = 1;
            }
        }
    }
    for (i, shape) in shapes.iter().enumerate() {
        // distinct base hue per object plus mid-frequency texture
        let hue = (i as f64 * 0.37).fract();
        let base = [
            0.5 + 0.4 * (hue * std::f64::consts::TAU).sin(),
            0.5 + 0.4 * ((hue + 0.33) * std::f64::consts::TAU).sin(),
            0.5 + 0.4 * ((hue + 0.67) * std::f64::consts::TAU).sin(),
        ];
        for y in 0..n {
            for x in 0..n {
                if shape.contains(y, x) {
                    let stripe = 0.12 * (((y / 2 + x / 2) % 2) as f64 - 0.5);
                    for c in 0..3 {
                        img[[y, x, c]] = (base[c] + stripe).clamp(0.0, 1.0);
                    }
                    ids[[y, x]] = 2 + i as u8;
                }
            }
        }
    }
    Ok((
        ImageTensor::new(img)?,
        SegmentationLabel {
            class_ids: ids,
            class_map,
        },
    ))
}

/// Scene with randomly placed objects; deterministic per spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<(ImageTensor, SegmentationLabel)> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let shapes = place_objects(spec, &mut rng);
    generate_scene_with_shapes(spec, &shapes)
}

/// Write `n` scenes plus their OBB labels and a trainer-ready manifest.
/// Scene i uses seed `template.seed + i`. Returns the manifest path.
pub fn generate_corpus(
    n: usize,
    template: &SceneSpec,
    d1: f64,
    out_dir: &Path,
) -> Result<PathBuf> {
    template.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    // scenes only contain the sky/ground background classes
    let bg = BackgroundClassSet::new(vec!["sky".into(), "ground".into()])?;
    let mut manifest = String::new();
    for i in 0..n {
        let spec = SceneSpec {
            seed: template.seed.wrapping_add(i as u64),
            ..*template
        };
        let (img, seg) = generate_scene(&spec)?;
        let hr_name = format!("scene_{i:03}.png");
        let seg_name = format!("seg_{i:03}.png");
        let obb_name = format!("obb_{i:03}.png");
        save_image(&img, &out_dir.join(&hr_name))?;
        crate::image::save_gray_u8(&seg.class_ids, &out_dir.join(&seg_name))?;
        save_class_map(&seg.class_map, &out_dir.join(format!("seg_{i:03}.classes.json")))?;
        let obb = build_obb_label(&seg, &bg, d1)?;
        save_obb(&obb, &out_dir.join(&obb_name))?;
        writeln!(
            manifest,
            "{}",
            serde_json::json!({ "hr": hr_name, "obb": obb_name })
        )
        .expect("string write");
    }
    let manifest_path = out_dir.join("manifest.jsonl");
    std::fs::write(&manifest_path, manifest).map_err(|e| Error::Io {
        path: manifest_path.clone(),
        source: e,
    })?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_objects_is_background_only() {
        let spec = SceneSpec {
            n_objects: 0,
            ..SceneSpec::default()
        };
        let (_, seg) = generate_scene(&spec).unwrap();
        assert!(seg.class_ids.iter().all(|v| *v <= 1));
        assert_eq!(seg.class_map.len(), 2);
    }

    #[test]
    fn same_seed_reproduces_scene() {
        let spec = SceneSpec {
            seed: 42,
            ..SceneSpec::default()
        };
        let (i1, s1) = generate_scene(&spec).unwrap();
        let (i2, s2) = generate_scene(&spec).unwrap();
        assert_eq!(i1.data(), i2.data());
        assert_eq!(s1.class_ids, s2.class_ids);
    }

    #[test]
    fn centered_rectangle_matches_analytic_indicator() {
        let spec = SceneSpec {
            size: 64,
            n_objects: 0,
            ..SceneSpec::default()
        };
        let shape = Shape {
            kind: ShapeKind::Rectangle,
            cy: 32.0,
            cx: 32.0,
            ry: 10.0,
            rx: 14.0,
        };
        let (_, seg) = generate_scene_with_shapes(&spec, std::slice::from_ref(&shape)).unwrap();
        for y in 0..64usize {
            for x in 0..64usize {
                // independent rectangle indicator
                let inside = (y as f64 - 32.0).abs() <= 10.0 && (x as f64 - 32.0).abs() <= 14.0;
                assert_eq!(seg.class_ids[[y, x]] == 2, inside, "({y},{x})");
            }
        }
    }

    #[test]
    fn ellipse_pixels_satisfy_the_analytic_region() {
        let spec = SceneSpec {
            size: 64,
            n_objects: 0,
            ..SceneSpec::default()
        };
        let shape = Shape {
            kind: ShapeKind::Ellipse,
            cy: 30.0,
            cx: 25.0,
            ry: 8.0,
            rx: 12.0,
        };
        let (_, seg) = generate_scene_with_shapes(&spec, std::slice::from_ref(&shape)).unwrap();
        let mut object_pixels = 0;
        for y in 0..64usize {
            for x in 0..64usize {
                if seg.class_ids[[y, x]] == 2 {
                    object_pixels += 1;
                    let q = ((y as f64 - 30.0) / 8.0).powi(2) + ((x as f64 - 25.0) / 12.0).powi(2);
                    assert!(q <= 1.0, "({y},{x}) outside the ellipse");
                }
            }
        }
        // roughly pi * ry * rx
        assert!(object_pixels > 250, "only {object_pixels} ellipse pixels");
    }

    #[test]
    fn out_of_canvas_shape_rejected() {
        let spec = SceneSpec {
            size: 32,
            n_objects: 0,
            ..SceneSpec::default()
        };
        let shape = Shape {
            kind: ShapeKind::Rectangle,
            cy: 2.0,
            cx: 16.0,
            ry: 5.0,
            rx: 5.0,
        };
        assert!(generate_scene_with_shapes(&spec, &[shape]).is_err());
        assert!(generate_scene(&SceneSpec {
            size: 16,
            ..SceneSpec::default()
        })
        .is_err());
    }

    #[test]
    fn random_scenes_only_use_known_class_names() {
        for seed in 0..5 {
            let (_, seg) = generate_scene(&SceneSpec {
                seed,
                size: 48,
                ..SceneSpec::default()
            })
            .unwrap();
            // background resolution must succeed for the sky/ground subset
            let sub = BackgroundClassSet::new(vec!["sky".into(), "ground".into()]).unwrap();
            assert!(sub.resolve(&seg.class_map).is_ok());
            // every id in the map appears valid
            let max_id = *seg.class_map.values().max().unwrap();
            assert!(seg.class_ids.iter().all(|v| *v <= max_id));
        }
    }

    #[test]
    fn corpus_counts_and_regeneration_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let template = SceneSpec {
            size: 48,
            seed: 9,
            ..SceneSpec::default()
        };
        let manifest = generate_corpus(4, &template, 2.0, &a).unwrap();
        let lines = std::fs::read_to_string(&manifest).unwrap();
        assert_eq!(lines.lines().count(), 4);
        let pngs = |d: &Path, prefix: &str| {
            std::fs::read_dir(d)
                .unwrap()
                .filter(|e| {
                    let name = e.as_ref().unwrap().file_name();
                    let name = name.to_string_lossy();
                    name.starts_with(prefix) && name.ends_with(".png")
                })
                .count()
        };
        assert_eq!(pngs(&a, "scene_"), 4);
        assert_eq!(pngs(&a, "obb_"), 4);

        generate_corpus(4, &template, 2.0, &b).unwrap();
        for entry in std::fs::read_dir(&a).unwrap() {
            let name = entry.unwrap().file_name();
            let fa = std::fs::read(a.join(&name)).unwrap();
            let fb = std::fs::read(b.join(&name)).unwrap();
            assert_eq!(fa, fb, "{name:?} differs between regenerations");
        }
    }

    #[test]
    fn empty_corpus_is_an_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest =
            generate_corpus(0, &SceneSpec::default(), 2.0, dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&manifest).unwrap(), "");
        let pngs = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".png"))
            .count();
        assert_eq!(pngs, 0);
    }

    #[test]
    fn corpus_feeds_the_trainer_loader() {
        let dir = tempfile::tempdir().unwrap();
        let template = SceneSpec {
            size: 48,
            seed: 3,
            ..SceneSpec::default()
        };
        let manifest = generate_corpus(2, &template, 2.0, dir.path()).unwrap();
        let data = crate::trainer::Dataset::load(&manifest).unwrap();
        assert_eq!(data.items.len(), 2);
        assert_eq!(data.items[0].0.height(), 48);
    }
}

//! Object / Background / Boundary labeling from segmentation maps.
//!
//! Class edges are detected as 4-neighbor class-id changes (both sides
//! marked), thickened by Euclidean-disk dilation, and the remaining
//! pixels split into background (named classes) and object.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_gray_u8, save_gray_u8};

/// Per-pixel tri-class region value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Object,
    Background,
    Boundary,
}

impl Region {
    pub fn to_u8(self) -> u8 {
        match self {
            Region::Object => 0,
            Region::Background => 1,
            Region::Boundary => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Region::Object),
            1 => Some(Region::Background),
            2 => Some(Region::Boundary),
            _ => None,
        }
    }
}

/// Pixel-wise class-id segmentation label with a class-name map.
#[derive(Debug, Clone)]
pub struct SegmentationLabel {
    pub class_ids: Array2<u8>,
    /// name -> id, as loaded from the dataset's class map JSON.
    pub class_map: BTreeMap<String, u8>,
}

impl SegmentationLabel {
    pub fn height(&self) -> usize {
        self.class_ids.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.class_ids.shape()[1]
    }

    pub fn class_name(&self, id: u8) -> Option<&str> {
        self.class_map
            .iter()
            .find(|(_, v)| **v == id)
            .map(|(k, _)| k.as_str())
    }
}

/// Class names treated as background. Default: sky, plant, ground, water.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundClassSet {
    pub names: Vec<String>,
}

impl Default for BackgroundClassSet {
    fn default() -> Self {
        Self {
            names: ["sky", "plant", "ground", "water"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

impl BackgroundClassSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidArgument(
                "background class set must be non-empty".into(),
            ));
        }
        Ok(Self { names })
    }

    /// Resolve names against a class map. Every name must resolve.
    pub fn resolve(&self, class_map: &BTreeMap<String, u8>) -> Result<Vec<u8>> {
        self.names
            .iter()
            .map(|n| {
                class_map
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::UnknownClassName(n.clone()))
            })
            .collect()
    }
}

/// Per-pixel OBB label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OBBLabel {
    pub region: Array2<u8>,
}

impl OBBLabel {
    pub fn height(&self) -> usize {
        self.region.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.region.shape()[1]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> OBBLabel {
        OBBLabel {
            region: self
                .region
                .slice(ndarray::s![y0..y0 + h, x0..x0 + w])
                .to_owned(),
        }
    }
}

/// The three one-hot binary masks of an OBB label.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub object: Array2<f64>,
    pub background: Array2<f64>,
    pub boundary: Array2<f64>,
}

impl MaskSet {
    pub fn height(&self) -> usize {
        self.object.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.object.shape()[1]
    }

    /// Check the exact one-hot partition invariant.
    pub fn is_partition(&self) -> bool {
        self.object
            .iter()
            .zip(&self.background)
            .zip(&self.boundary)
            .all(|((o, b), e)| {
                (*o == 0.0 || *o == 1.0)
                    && (*b == 0.0 || *b == 1.0)
                    && (*e == 0.0 || *e == 1.0)
                    && o + b + e == 1.0
            })
    }
}

/// Mark pixels whose 4-neighborhood contains a different class id.
/// Both sides of a class change are marked.
pub fn detect_class_edges(seg: &SegmentationLabel) -> Array2<u8> {
    let (h, w) = (seg.height(), seg.width());
    let ids = &seg.class_ids;
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let c = ids[[y, x]];
            let differs = (y > 0 && ids[[y - 1, x]] != c)
                || (y + 1 < h && ids[[y + 1, x]] != c)
                || (x > 0 && ids[[y, x - 1]] != c)
                || (x + 1 < w && ids[[y, x + 1]] != c);
            if differs {
                out[[y, x]] = 1;
            }
        }
    }
    out
}

/// Euclidean-disk dilation: output pixel is 1 iff some input 1-pixel lies
/// within distance `diameter / 2`. Diameter 0 is the identity.
pub fn dilate_disk(mask: &Array2<u8>, diameter: f64) -> Result<Array2<u8>> {
    if diameter < 0.0 || !diameter.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "dilation diameter must be non-negative, got {diameter}"
        )));
    }
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let radius = diameter / 2.0;
    let r2 = radius * radius;
    let ri = radius.floor() as i64;

    // Structuring-element offsets within the Euclidean disk.
    let mut offsets = Vec::new();
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            if (dy * dy + dx * dx) as f64 <= r2 {
                offsets.push((dy, dx));
            }
        }
    }

    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    out[[ny as usize, nx as usize]] = 1;
                }
            }
        }
    }
    Ok(out)
}

/// Build the OBB label: boundary = dilated class edges (takes precedence),
/// remaining pixels background if their class is in `bg`, object otherwise.
pub fn build_obb_label(
    seg: &SegmentationLabel,
    bg: &BackgroundClassSet,
    d1: f64,
) -> Result<OBBLabel> {
    let bg_ids = bg.resolve(&seg.class_map)?;
    let edges = detect_class_edges(seg);
    let boundary = dilate_disk(&edges, d1)?;
    let (h, w) = (seg.height(), seg.width());
    let mut region = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            region[[y, x]] = if boundary[[y, x]] == 1 {
                Region::Boundary.to_u8()
            } else if bg_ids.contains(&seg.class_ids[[y, x]]) {
                Region::Background.to_u8()
            } else {
                Region::Object.to_u8()
            };
        }
    }
    Ok(OBBLabel { region })
}

/// Split an OBB label into its three one-hot binary masks.
pub fn masks_from_obb(obb: &OBBLabel) -> MaskSet {
    let (h, w) = (obb.height(), obb.width());
    let mut object = Array2::zeros((h, w));
    let mut background = Array2::zeros((h, w));
    let mut boundary = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            match Region::from_u8(obb.region[[y, x]]).expect("valid region value") {
                Region::Object => object[[y, x]] = 1.0,
                Region::Background => background[[y, x]] = 1.0,
                Region::Boundary => boundary[[y, x]] = 1.0,
            }
        }
    }
    MaskSet {
        object,
        background,
        boundary,
    }
}

/// Write an OBB label as a single-channel 8-bit PNG (0/1/2 values).
pub fn save_obb(obb: &OBBLabel, path: &Path) -> Result<()> {
    save_gray_u8(&obb.region, path)
}

/// Load an OBB label, rejecting any pixel value outside {0, 1, 2}.
pub fn load_obb(path: &Path) -> Result<OBBLabel> {
    let region = load_gray_u8(path)?;
    if let Some(bad) = region.iter().find(|v| **v > 2) {
        return Err(Error::InvalidObbValue {
            path: path.to_path_buf(),
            value: *bad,
        });
    }
    Ok(OBBLabel { region })
}

/// Load a class-id segmentation PNG plus its JSON class-name map.
pub fn load_segmentation(seg_path: &Path, class_map_path: &Path) -> Result<SegmentationLabel> {
    let class_ids = load_gray_u8(seg_path)?;
    let text = std::fs::read_to_string(class_map_path).map_err(|e| Error::Io {
        path: class_map_path.to_path_buf(),
        source: e,
    })?;
    let class_map: BTreeMap<String, u8> =
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: class_map_path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
    Ok(SegmentationLabel {
        class_ids,
        class_map,
    })
}

pub fn save_class_map(class_map: &BTreeMap<String, u8>, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(class_map).expect("serializable map");
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

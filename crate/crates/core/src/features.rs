//! VGG-16-topology feature extractor with frozen weights.
//!
//! Provides the named activation taps used by the perceptual terms, in
//! two modes: `pretrained` loads weights from an external archive;
//! `surrogate` uses seeded random weights with the identical topology,
//! so gradient checks and loss oracles run without any weight download.

use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::container::{read_container, write_container, Container};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::nn::{ops, Conv2d};

/// Named tap points on the VGG-16 convolutional stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureTap {
    Relu1_2,
    Relu2_2,
    Relu4_1,
    Relu4_3,
}

impl FeatureTap {
    pub const ALL: [FeatureTap; 4] = [
        FeatureTap::Relu1_2,
        FeatureTap::Relu2_2,
        FeatureTap::Relu4_1,
        FeatureTap::Relu4_3,
    ];

    /// Index into the conv layer list of the conv whose activation is tapped.
    fn conv_index(self) -> usize {
        match self {
            FeatureTap::Relu1_2 => 1,
            FeatureTap::Relu2_2 => 3,
            FeatureTap::Relu4_1 => 7,
            FeatureTap::Relu4_3 => 9,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            FeatureTap::Relu1_2 => 64,
            FeatureTap::Relu2_2 => 128,
            FeatureTap::Relu4_1 | FeatureTap::Relu4_3 => 512,
        }
    }

    /// Total spatial downsampling factor at the tap.
    pub fn downsample(self) -> usize {
        match self {
            FeatureTap::Relu1_2 => 1,
            FeatureTap::Relu2_2 => 2,
            FeatureTap::Relu4_1 | FeatureTap::Relu4_3 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureTap::Relu1_2 => "relu1_2",
            FeatureTap::Relu2_2 => "relu2_2",
            FeatureTap::Relu4_1 => "relu4_1",
            FeatureTap::Relu4_3 => "relu4_3",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        FeatureTap::ALL
            .iter()
            .copied()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature tap {s:?}")))
    }
}

/// One element of the VGG prefix: a 3x3/s1/p1 conv (+ReLU) or a 2x2 pool.
#[derive(Debug, Clone, Copy)]
enum StackItem {
    Conv(usize),
    Pool,
}

/// conv name, in channels, out channels of the VGG-16 prefix up to conv4_3.
fn conv_plan_full() -> Vec<(&'static str, usize, usize)> {
    vec![
        ("conv1_1", 3, 64),
        ("conv1_2", 64, 64),
        ("conv2_1", 64, 128),
        ("conv2_2", 128, 128),
        ("conv3_1", 128, 256),
        ("conv3_2", 256, 256),
        ("conv3_3", 256, 256),
        ("conv4_1", 256, 512),
        ("conv4_2", 512, 512),
        ("conv4_3", 512, 512),
    ]
}

fn stack_items() -> Vec<StackItem> {
    use StackItem::*;
    vec![
        Conv(0),
        Conv(1), // relu1_2
        Pool,
        Conv(2),
        Conv(3), // relu2_2
        Pool,
        Conv(4),
        Conv(5),
        Conv(6),
        Pool,
        Conv(7), // relu4_1
        Conv(8),
        Conv(9), // relu4_3
    ]
}

/// Extractor construction mode.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorMode {
    Pretrained { archive: PathBuf },
    Surrogate { seed: u64 },
}

/// ImageNet channel statistics applied to [0,1] RGB before the stack.
pub const PREPROC_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const PREPROC_STD: [f64; 3] = [0.229, 0.224, 0.225];

pub struct FeatureExtractor {
    convs: Vec<Conv2d>,
    pub mode_name: String,
}

/// Per-layer forward intermediates kept for the input-gradient pass.
pub struct ExtractCache {
    /// mirror of the stack up to the tap
    steps: Vec<StepCache>,
    input_dim: (usize, usize, usize, usize),
}

enum StepCache {
    Conv {
        index: usize,
        input_dim: (usize, usize, usize, usize),
        post_relu: Array4<f64>,
    },
    Pool {
        input_dim: (usize, usize, usize, usize),
        arg: Vec<usize>,
    },
}

/// Expected tensor names and shapes for a pretrained weight archive.
pub fn expected_layer_manifest() -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    for (name, ic, oc) in conv_plan_full() {
        out.push((format!("{name}.weight"), vec![oc, ic * 9]));
        out.push((format!("{name}.bias"), vec![oc]));
    }
    out
}

/// Build an extractor. Surrogate mode seeds the weights; pretrained mode
/// validates and loads the named-layer archive.
pub fn load_extractor(mode: &ExtractorMode) -> Result<FeatureExtractor> {
    let mut rng = match mode {
        ExtractorMode::Surrogate { seed } => ChaCha20Rng::seed_from_u64(*seed),
        ExtractorMode::Pretrained { .. } => ChaCha20Rng::seed_from_u64(0),
    };
    let mut convs: Vec<Conv2d> = conv_plan_full()
        .iter()
        .map(|(_, ic, oc)| Conv2d::new(*ic, *oc, 3, 1, 1, &mut rng))
        .collect();

    let mode_name = match mode {
        ExtractorMode::Surrogate { seed } => format!("surrogate({seed})"),
        ExtractorMode::Pretrained { archive } => {
            let container = read_container(archive)?;
            for ((name, _, _), conv) in conv_plan_full().iter().zip(convs.iter_mut()) {
                let wname = format!("{name}.weight");
                let bname = format!("{name}.bias");
                let w = container.get(&wname).ok_or_else(|| Error::WeightArchive {
                    path: archive.clone(),
                    reason: format!("missing layer {wname}"),
                })?;
                let b = container.get(&bname).ok_or_else(|| Error::WeightArchive {
                    path: archive.clone(),
                    reason: format!("missing layer {bname}"),
                })?;
                if w.shape() != conv.w.shape() {
                    return Err(Error::WeightArchive {
                        path: archive.clone(),
                        reason: format!(
                            "layer {wname}: shape {:?} does not match expected {:?}",
                            w.shape(),
                            conv.w.shape()
                        ),
                    });
                }
                if b.shape() != conv.b.shape() {
                    return Err(Error::WeightArchive {
                        path: archive.clone(),
                        reason: format!(
                            "layer {bname}: shape {:?} does not match expected {:?}",
                            b.shape(),
                            conv.b.shape()
                        ),
                    });
                }
                conv.w
                    .assign(&w.view().into_dimensionality::<ndarray::Ix2>().expect("2d"));
                conv.b
                    .assign(&b.view().into_dimensionality::<ndarray::Ix1>().expect("1d"));
            }
            "pretrained".to_string()
        }
    };
    Ok(FeatureExtractor { convs, mode_name })
}

impl FeatureExtractor {
    /// Export the weights in the archive format (usable as a pretrained input).
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let tensors = conv_plan_full()
            .iter()
            .zip(&self.convs)
            .flat_map(|((name, _, _), conv)| {
                vec![
                    (format!("{name}.weight"), conv.w.clone().into_dyn()),
                    (format!("{name}.bias"), conv.b.clone().into_dyn()),
                ]
            })
            .collect();
        write_container(
            path,
            &Container {
                meta: serde_json::json!({"kind": "vgg16-prefix-weights"}),
                tensors,
            },
        )
    }

    /// SHA-256 over all weights; used to assert the frozen invariant.
    pub fn weights_checksum(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for conv in &self.convs {
            for v in conv.w.iter().chain(conv.b.iter()) {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    fn preprocess(hwc: &Array3<f64>) -> Array4<f64> {
        let (h, w, _) = hwc.dim();
        let mut x = Array4::zeros((1, 3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for xx in 0..w {
                    x[[0, c, y, xx]] = (hwc[[y, xx, c]] - PREPROC_MEAN[c]) / PREPROC_STD[c];
                }
            }
        }
        x
    }

    /// Forward pass on raw HWC data (values need not lie in [0,1]) up to
    /// and including the tap activation, keeping backward intermediates.
    pub fn extract_cached(&self, hwc: &Array3<f64>, tap: FeatureTap) -> Result<(Array3<f64>, ExtractCache)> {
        let (h, w, ch) = hwc.dim();
        if ch != 3 {
            return Err(Error::DimensionMismatch(format!("expected 3 channels, got {ch}")));
        }
        if h < tap.downsample() || w < tap.downsample() {
            return Err(Error::DimensionMismatch(format!(
                "image {h}x{w} too small for tap {} (downsample {})",
                tap.name(),
                tap.downsample()
            )));
        }
        let mut x = Self::preprocess(hwc);
        let input_dim = x.dim();
        let stop = tap.conv_index();
        let mut steps = Vec::new();
        for item in stack_items() {
            match item {
                StackItem::Conv(i) => {
                    let conv_in_dim = x.dim();
                    let y = self.convs[i].forward(&x)?;
                    let y = ops::relu(&y);
                    steps.push(StepCache::Conv {
                        index: i,
                        input_dim: conv_in_dim,
                        post_relu: y.clone(),
                    });
                    x = y;
                    if i == stop {
                        break;
                    }
                }
                StackItem::Pool => {
                    let in_dim = x.dim();
                    let (y, arg) = ops::maxpool2(&x);
                    steps.push(StepCache::Pool { input_dim: in_dim, arg });
                    x = y;
                }
            }
        }
        let feat = x.index_axis(Axis(0), 0).to_owned();
        Ok((feat, ExtractCache { steps, input_dim }))
    }

    /// Feature map at a tap for a valid image: (C, H', W').
    pub fn extract(&self, img: &ImageTensor, tap: FeatureTap) -> Result<Array3<f64>> {
        Ok(self.extract_cached(img.data(), tap)?.0)
    }

    /// Backpropagate a feature-space gradient to the HWC input image.
    pub fn input_gradient(&self, cache: &ExtractCache, gfeat: &Array3<f64>) -> Array3<f64> {
        let (c, fh, fw) = gfeat.dim();
        let mut g = gfeat
            .to_shape((1, c, fh, fw))
            .expect("reshape")
            .to_owned();
        for step in cache.steps.iter().rev() {
            match step {
                StepCache::Conv {
                    index,
                    input_dim,
                    post_relu,
                } => {
                    let masked = ops::relu_backward(post_relu, &g);
                    g = self.convs[*index].input_grad(*input_dim, &masked);
                }
                StepCache::Pool { input_dim, arg } => {
                    g = ops::maxpool2_backward(*input_dim, arg, &g);
                }
            }
        }
        // undo the preprocessing scale
        let (_, _, h, w) = cache.input_dim;
        let mut out = Array3::zeros((h, w, 3));
        for ch in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    out[[y, x, ch]] = g[[0, ch, y, x]] / PREPROC_STD[ch];
                }
            }
        }
        out
    }
}

/// Analytic receptive-field side length of one output unit at a tap,
/// from the standard recurrence over the layer prefix.
pub fn receptive_field(tap: FeatureTap) -> usize {
    let stop = tap.conv_index();
    let mut r = 1usize; // receptive field
    let mut j = 1usize; // jump (effective stride)
    for item in stack_items() {
        match item {
            StackItem::Conv(i) => {
                r += 2 * j; // kernel 3, stride 1
                if i == stop {
                    break;
                }
            }
            StackItem::Pool => {
                r += j; // kernel 2
                j *= 2;
            }
        }
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    #[test]
    fn surrogate_is_deterministic() {
        let a = load_extractor(&ExtractorMode::Surrogate { seed: 7 }).unwrap();
        let b = load_extractor(&ExtractorMode::Surrogate { seed: 7 }).unwrap();
        assert_eq!(a.weights_checksum(), b.weights_checksum());
        let c = load_extractor(&ExtractorMode::Surrogate { seed: 8 }).unwrap();
        assert_ne!(a.weights_checksum(), c.weights_checksum());
    }

    #[test]
    fn tap_shapes_and_channels() {
        let fx = load_extractor(&ExtractorMode::Surrogate { seed: 1 }).unwrap();
        let img = ImageTensor::constant(32, 32, 0.4);
        for (tap, ch, down) in [
            (FeatureTap::Relu1_2, 64, 1),
            (FeatureTap::Relu2_2, 128, 2),
            (FeatureTap::Relu4_1, 512, 8),
            (FeatureTap::Relu4_3, 512, 8),
        ] {
            let f = fx.extract(&img, tap).unwrap();
            assert_eq!(f.dim(), (ch, 32 / down, 32 / down), "{}", tap.name());
        }
    }

    #[test]
    fn shape_law_is_ceil_of_input_over_downsample() {
        let fx = load_extractor(&ExtractorMode::Surrogate { seed: 1 }).unwrap();
        for &(h, w) in &[(17usize, 23usize), (9, 33), (16, 16), (20, 10)] {
            let img = ImageTensor::constant(h, w, 0.2);
            for tap in FeatureTap::ALL {
                let f = fx.extract(&img, tap).unwrap();
                let d = tap.downsample();
                assert_eq!(
                    (f.dim().1, f.dim().2),
                    (h.div_ceil(d), w.div_ceil(d)),
                    "{h}x{w} {}",
                    tap.name()
                );
            }
        }
    }

    #[test]
    fn surrogate_matches_direct_convolution_reference() {
        // conv-by-definition evaluation of the first two layers at relu1_2
        let fx = load_extractor(&ExtractorMode::Surrogate { seed: 3 }).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let data = Array3::from_shape_fn((8, 8, 3), |_| rng.gen::<f64>());
        let img = ImageTensor::new(data.clone()).unwrap();
        let got = fx.extract(&img, FeatureTap::Relu1_2).unwrap();

        let pre = FeatureExtractor::preprocess(&data);
        let ref_conv = |x: &Array4<f64>, conv: &Conv2d| -> Array4<f64> {
            let (n, c, h, w) = x.dim();
            let mut y = Array4::zeros((n, conv.out_ch, h, w));
            for i in 0..n {
                for oc in 0..conv.out_ch {
                    for oy in 0..h {
                        for ox in 0..w {
                            let mut acc = conv.b[oc];
                            for ic in 0..c {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = oy as i64 + ky - 1;
                                        let ix = ox as i64 + kx - 1;
                                        if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                            continue;
                                        }
                                        acc += conv.w[[oc, (ic * 3 + ky as usize) * 3 + kx as usize]]
                                            * x[[i, ic, iy as usize, ix as usize]];
                                    }
                                }
                            }
                            y[[i, oc, oy, ox]] = acc.max(0.0);
                        }
                    }
                }
            }
            y
        };
        let want = ref_conv(&ref_conv(&pre, &fx.convs[0]), &fx.convs[1]);
        let max_err = got
            .iter()
            .zip(want.index_axis(Axis(0), 0).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-5, "max_err {max_err}");
    }

    #[test]
    fn pretrained_round_trip_and_missing_layer_error() {
        let fx = load_extractor(&ExtractorMode::Surrogate { seed: 5 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let archive = dir.path().join("weights.bin");
        fx.save_weights(&archive).unwrap();

        let loaded = load_extractor(&ExtractorMode::Pretrained {
            archive: archive.clone(),
        })
        .unwrap();
        assert_eq!(loaded.weights_checksum(), fx.weights_checksum());

        // drop a layer and expect an error naming it
        let mut c = read_container(&archive).unwrap();
        c.tensors.retain(|(n, _)| n != "conv3_2.weight");
        let broken = dir.path().join("broken.bin");
        write_container(&broken, &c).unwrap();
        let err = match load_extractor(&ExtractorMode::Pretrained { archive: broken }) {
            Err(e) => e,
            Ok(_) => panic!("expected missing-layer error"),
        };
        assert!(err.to_string().contains("conv3_2.weight"), "{err}");
    }

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(FeatureTap::Relu1_2), 5);
        assert_eq!(receptive_field(FeatureTap::Relu2_2), 14);
        assert_eq!(receptive_field(FeatureTap::Relu4_1), 60);
        assert_eq!(receptive_field(FeatureTap::Relu4_3), 92);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let fx = load_extractor(&ExtractorMode::Surrogate { seed: 2 }).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let data = Array3::from_shape_fn((8, 8, 3), |_| rng.gen::<f64>());
        let gfeat_seed: Array3<f64> = {
            let (f, _) = fx.extract_cached(&data, FeatureTap::Relu2_2).unwrap();
            Array3::from_shape_fn(f.dim(), |_| rng.gen_range(-1.0..1.0))
        };
        let loss = |d: &Array3<f64>| -> f64 {
            let (f, _) = fx.extract_cached(d, FeatureTap::Relu2_2).unwrap();
            f.iter().zip(gfeat_seed.iter()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = fx.extract_cached(&data, FeatureTap::Relu2_2).unwrap();
        let g = fx.input_gradient(&cache, &gfeat_seed);
        let h = 1e-6;
        for &(y, x, c) in &[(0usize, 0usize, 0usize), (3, 5, 1), (7, 7, 2)] {
            let mut dp = data.clone();
            dp[[y, x, c]] += h;
            let mut dm = data.clone();
            dm[[y, x, c]] -= h;
            let fd = (loss(&dp) - loss(&dm)) / (2.0 * h);
            assert!(
                (fd - g[[y, x, c]]).abs() < 1e-4 * (1.0 + fd.abs()),
                "fd {fd} vs {}",
                g[[y, x, c]]
            );
        }
    }
}

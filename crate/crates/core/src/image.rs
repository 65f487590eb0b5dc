//! Image representation and PNG IO.
//!
//! Images are stored as `H x W x 3` arrays of `f64` in `[0, 1]`, RGB order.

use std::path::Path;

use image::{DynamicImage, ImageReader};
use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// An RGB raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    /// Wrap an `H x W x 3` array. Values are clamped to `[0, 1]`;
    /// non-finite values are rejected.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::DimensionMismatch(format!(
                "expected 3 channels, got {}",
                data.shape()[2]
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "image contains non-finite values".into(),
            ));
        }
        let data = data.mapv(|v| v.clamp(0.0, 1.0));
        Ok(Self { data })
    }

    /// Wrap raw data without clamping. Used for intermediate results
    /// (e.g. unclamped network output during training).
    pub fn from_raw_unclamped(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((height, width, 3)),
        }
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            data: Array3::from_elem((height, width, 3), value.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn clamped(&self) -> Self {
        Self {
            data: self.data.mapv(|v| v.clamp(0.0, 1.0)),
        }
    }

    /// ITU-R BT.601 luma: 0.299 R + 0.587 G + 0.114 B.
    pub fn to_luma(&self) -> Array2<f64> {
        let (h, w) = (self.height(), self.width());
        Array2::from_shape_fn((h, w), |(y, x)| {
            0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
        })
    }
}

/// Load an 8- or 16-bit RGB or grayscale PNG, scaling to `[0, 1]`.
/// Grayscale is replicated to 3 channels.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let reader = ImageReader::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let img = reader.decode().map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;

    let data = match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0
            })
        }
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
                g.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
            })
        }
        DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
            })
        }
        DynamicImage::ImageRgb16(rgb) => {
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                rgb.get_pixel(x as u32, y as u32)[c] as f64 / 65535.0
            })
        }
        other => {
            return Err(Error::UnsupportedLayout {
                path: path.to_path_buf(),
                layout: format!("{:?}", other.color()),
            })
        }
    };
    ImageTensor::new(data)
}

/// Quantize `[0, 1]` to u8 with round-half-away-from-zero.
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an 8-bit RGB PNG. Values are clamped before quantization.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize_u8(img.data()[[y, x, 0]]),
                quantize_u8(img.data()[[y, x, 1]]),
                quantize_u8(img.data()[[y, x, 2]]),
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

/// Load a single-channel 8-bit PNG as raw class/label values (no scaling).
pub fn load_gray_u8(path: &Path) -> Result<Array2<u8>> {
    let reader = ImageReader::open(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let img = reader.decode().map_err(|e| Error::ImageDecode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let g = match img {
        DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(Error::UnsupportedLayout {
                path: path.to_path_buf(),
                layout: format!("expected 8-bit grayscale, got {:?}", other.color()),
            })
        }
    };
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        g.get_pixel(x as u32, y as u32)[0]
    }))
}

/// Write a single-channel 8-bit PNG of raw values.
pub fn save_gray_u8(data: &Array2<u8>, path: &Path) -> Result<()> {
    let (h, w) = (data.shape()[0], data.shape()[1]);
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([data[[y, x]]]));
        }
    }
    buf.save(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

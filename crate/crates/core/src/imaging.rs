//! The 64x64x3 image type shared by the generator, the dataset and the style
//! transfer backends, plus PNG/PPM conversion.

use std::fs;
use std::path::Path;

use crate::diff::conv::resize_bilinear;
use crate::diff::Tensor;
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 64;
pub const IMAGE_CHANNELS: usize = 3;

/// A `64 x 64 x 3` image with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor,
}

impl ImageTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape() != [IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS] {
            return Err(Error::shape(format!(
                "image must be 64x64x3, got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::NonFinite("image pixel".into()));
        }
        if data.max_abs() > 1.0 {
            return Err(Error::invalid(format!(
                "image values must lie in [-1, 1], max |v| = {}",
                data.max_abs()
            )));
        }
        Ok(Self { data })
    }

    /// Clamps into `[-1, 1]` instead of rejecting out-of-range values.
    pub fn clamped(data: Tensor) -> Result<Self> {
        Self::new(data.map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn filled(rgb: [f64; 3]) -> Result<Self> {
        let data = (0..IMAGE_SIZE * IMAGE_SIZE).flat_map(|_| rgb).collect();
        Self::new(Tensor::new(&[IMAGE_SIZE, IMAGE_SIZE, IMAGE_CHANNELS], data))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Per-channel mean.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.data().chunks(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        m.map(|s| s / (IMAGE_SIZE * IMAGE_SIZE) as f64)
    }

    /// Quantizes to 8-bit RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .data()
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(bytes: &[u8]) -> Result<Self> {
        let rgb = rgb8_to_unit(bytes, IMAGE_SIZE, IMAGE_SIZE)?;
        Self::new(rgb.map(|v| v * 2.0 - 1.0))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_png_rgb8(path, IMAGE_SIZE, IMAGE_SIZE, &self.to_rgb8())
    }

    /// Binary PPM (P6) writer with no external dependency.
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{IMAGE_SIZE} {IMAGE_SIZE}\n255\n").into_bytes();
        out.extend(self.to_rgb8());
        write_file(path, &out)
    }

    /// Loads any PNG, bilinearly resizes it to 64x64 and maps it to `[-1, 1]`.
    pub fn load(path: &Path) -> Result<Self> {
        let rgb = load_rgb(path)?;
        let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
        let resized = if (h, w) == (IMAGE_SIZE, IMAGE_SIZE) {
            rgb
        } else {
            resize_rgb(&rgb, IMAGE_SIZE, IMAGE_SIZE)
        };
        Self::clamped(resized.map(|v| v * 2.0 - 1.0))
    }
}

fn rgb8_to_unit(bytes: &[u8], h: usize, w: usize) -> Result<Tensor> {
    if bytes.len() != h * w * 3 {
        return Err(Error::shape(format!(
            "expected {} RGB bytes, got {}",
            h * w * 3,
            bytes.len()
        )));
    }
    Ok(Tensor::new(
        &[h, w, 3],
        bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

/// Bilinear resize of an `H x W x C` tensor.
pub fn resize_rgb(img: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = img.shape();
    let batched = img.clone().reshape(&[1, s[0], s[1], s[2]]);
    resize_bilinear(&batched, out_h, out_w).reshape(&[out_h, out_w, s[2]])
}

/// Reads a PNG as an `H x W x 3` tensor with values in `[0, 1]`. Alpha is dropped and
/// grayscale is broadcast.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    rgb8_to_unit(img.as_raw(), h as usize, w as usize)
}

pub fn save_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let buf = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .ok_or_else(|| Error::shape("RGB buffer size does not match dimensions"))?;
    let mut out = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    write_file(path, &out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

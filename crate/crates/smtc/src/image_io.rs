//! 8-bit PNG reading and writing for frames, flow renderings and maps.
//!
//! Values in `[0, 1]` are stored as `round(255·x)`; reading divides by 255.

use std::path::Path;

use image::{GrayImage, RgbImage};
use smtc_core::Tensor;

use crate::error::{Error, Result};

/// `round(255·x)` after clamping to `[0, 1]`.
pub fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn dequantize(v: u8) -> f64 {
    v as f64 / 255.0
}

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Trailing `H × W` extents of a map with any number of leading unit axes.
fn plane_dims(path: &Path, shape: &[usize]) -> Result<(usize, usize)> {
    let n = shape.len();
    if n < 2 || shape[..n - 2].iter().any(|&d| d != 1) {
        return Err(Error::format(path, format!("expected a single-channel map, got shape {shape:?}")));
    }
    Ok((shape[n - 2], shape[n - 1]))
}

/// Writes a single-channel map (`[H,W]`, `[1,H,W]` or `[1,1,H,W]`).
pub fn write_gray(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let (h, w) = plane_dims(path, map.shape())?;
    let bytes: Vec<u8> = map.data().iter().map(|&v| quantize(v)).collect();
    let img = GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    img.save(path).map_err(image_err(path))
}

/// Writes a `[3,H,W]` image.
pub fn write_rgb(path: &Path, img: &Tensor<f64>) -> Result<()> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::format(path, format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(quantize(d[c * plane + i]));
        }
    }
    let out = RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches extents");
    out.save(path).map_err(image_err(path))
}

/// `[H,W]` in `[0, 1]`; colour files are converted to luma.
pub fn read_gray(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(image_err(path))?.into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(dequantize).collect();
    Ok(Tensor::new(&[h as usize, w as usize], data)?)
}

/// `[3,H,W]` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor<f64>> {
    let img = image::open(path).map_err(image_err(path))?.into_rgb8();
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = dequantize(raw[3 * i + c]);
        }
    }
    Ok(Tensor::new(&[3, h as usize, w as usize], data)?)
}

/// Binary `[H,W]` mask: any nonzero pixel is foreground.
pub fn read_mask(path: &Path) -> Result<Tensor<f64>> {
    Ok(read_gray(path)?.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
}

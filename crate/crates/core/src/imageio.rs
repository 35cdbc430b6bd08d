//! 8-bit grayscale image I/O and the mapping to model space.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, ImageFormat};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::tensor::Tensor;

/// Decode any supported image and convert it to 8-bit luma.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let img = image::load_from_memory(bytes)
        .map_err(|e| Error::format("image", e.to_string()))?;
    Ok(img.into_luma8())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_gray(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn encode_png(img: &GrayImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| Error::format("png", e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, img: &GrayImage) -> Result<()> {
    fsutil::write_atomic(path, &encode_png(img)?)
}

/// Resize to `size x size` with a triangle filter unless already there.
pub fn resize_square(img: &GrayImage, size: usize) -> Result<GrayImage> {
    if size == 0 {
        return Err(Error::param("working resolution must be positive"));
    }
    let s = u32::try_from(size).map_err(|_| Error::param("resolution too large"))?;
    if img.width() == s && img.height() == s {
        return Ok(img.clone());
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::param("cannot resize an empty image"));
    }
    Ok(image::imageops::resize(img, s, s, FilterType::Triangle))
}

/// Pixel values mapped affinely from `[0, 255]` to `[-1, 1]`, shape `[h, w]`.
pub fn to_unit_tensor(img: &GrayImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.as_raw().iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    Tensor::new(vec![h, w], data).expect("pixel count matches shape")
}

/// Inverse of [`to_unit_tensor`], rounding to the nearest level and clamping.
pub fn from_unit_tensor(t: &Tensor) -> Result<GrayImage> {
    if t.shape().len() != 2 {
        return Err(Error::param(format!("expected a 2-D tensor, got shape {:?}", t.shape())));
    }
    let (h, w) = t.plane_dims();
    let data = t.data().iter().map(|&v| to_u8((v + 1.0) * 127.5)).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, data).expect("buffer matches dimensions"))
}

/// Round half away from zero and clamp into `[0, 255]`. NaN maps to 0.
pub fn to_u8(v: f64) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact() {
        let data: Vec<u8> = (0..=255u8).chain(0..=255u8).collect();
        let img = GrayImage::from_raw(32, 16, data).unwrap();
        let back = decode_gray(&encode_png(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn unit_mapping_round_trips_levels() {
        let img = GrayImage::from_raw(4, 1, vec![0, 1, 128, 255]).unwrap();
        let t = to_unit_tensor(&img);
        assert_eq!(t.data()[0], -1.0);
        assert_eq!(t.data()[3], 1.0);
        assert_eq!(from_unit_tensor(&t).unwrap(), img);
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = GrayImage::from_pixel(50, 40, image::Luma([77]));
        let r = resize_square(&img, 32).unwrap();
        assert_eq!(r.dimensions(), (32, 32));
        assert!(r.pixels().all(|p| p.0[0] == 77));
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(decode_gray(b"not an image").is_err());
    }
}

//! PNG/JPEG decoding into tensors and PNG encoding of masks and maps.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, ProbabilityMap};
use crate::tensor::{Shape, Tensor};

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))
}

/// Loads an RGB image as a (1, 3, h, w) tensor scaled to [0, 1].
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = decode(path)?.to_rgb8();
    Ok(rgb_to_tensor(&img))
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(Shape::new(1, 3, h, w), data).expect("rgb dims")
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Inverse of [`rgb_to_tensor`] for values on the 1/255 grid.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.batch != 1 || s.channels != 3 {
        return Err(Error::invalid(format!("expected a (1, 3, h, w) image, got {s}")));
    }
    let plane = s.plane();
    let d = t.data();
    Ok(RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        let i = y as usize * s.width + x as usize;
        Rgb([to_byte(d[i]), to_byte(d[plane + i]), to_byte(d[2 * plane + i])])
    }))
}

pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    tensor_to_rgb(t)?.save(path).map_err(|e| image_err(path, e))
}

/// Writes an 8-bit single-channel PNG with values {0, 255}.
pub fn save_mask(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

/// Reads a ground-truth or predicted mask; any value other than 0 or 255
/// (after grayscale conversion) is rejected.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = decode(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut bits = Vec::with_capacity(w * h);
    for px in img.pixels() {
        match px[0] {
            0 => bits.push(false),
            255 => bits.push(true),
            v => return Err(image_err(path, format!("non-binary mask value {v}"))),
        }
    }
    BinaryMask::new(h, w, bits)
}

/// Writes round(p · 255) as 8-bit grayscale.
pub fn save_probability(path: impl AsRef<Path>, map: &ProbabilityMap) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([to_byte(map.get(x as usize, y as usize))])
    });
    img.save(path).map_err(|e| image_err(path, e))
}

pub fn load_probability(path: impl AsRef<Path>) -> Result<ProbabilityMap> {
    let path = path.as_ref();
    let img = decode(path)?.to_luma8();
    let values = img.pixels().map(|p| p[0] as f64 / 255.0).collect();
    ProbabilityMap::new(img.height() as usize, img.width() as usize, values)
}

//! Synthetic stand-in data: a bright ellipse on a darker textured background.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{DatasetIndex, IMAGES_DIR, MASKS_DIR, TRUTH_SUFFIX};
use super::io::{save_image, save_mask};
use crate::error::{Error, Result};
use crate::maps::{BinaryMask, ProbabilityMap};
use crate::tensor::{Shape, Tensor};

/// Geometry of one generated lesion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    /// Rotation of the first axis, radians.
    pub angle: f64,
}

impl Ellipse {
    /// Point-in-ellipse test at pixel coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.semi_axes.0;
        let v = (-dx * s + dy * c) / self.semi_axes.1;
        u * u + v * v <= 1.0
    }

    pub fn rasterize(&self, size: usize) -> BinaryMask {
        BinaryMask::from_fn(size, size, |x, y| self.contains(x as f64, y as f64))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// (1, 3, size, size), every value a multiple of 1/255 so it survives PNG exactly.
    pub image: Tensor,
    pub mask: BinaryMask,
    pub ellipse: Ellipse,
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Draws one sample from `rng`.
pub fn synthesize_sample(size: usize, rng: &mut impl Rng) -> SyntheticSample {
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let ellipse = Ellipse {
        center: (
            mid + rng.random_range(-s / 8.0..=s / 8.0),
            mid + rng.random_range(-s / 8.0..=s / 8.0),
        ),
        semi_axes: (rng.random_range(s / 8.0..=s / 4.0), rng.random_range(s / 8.0..=s / 4.0)),
        angle: rng.random_range(0.0..PI),
    };
    let fill: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.65..0.95));
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.4));
    let freq = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
    let phase = rng.random_range(0.0..2.0 * PI);

    let mask = ellipse.rasterize(size);
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let inside = mask.get(x, y);
            let texture = 0.05 * (freq.0 * x as f64 + freq.1 * y as f64 + phase).sin();
            for c in 0..3 {
                let noise = rng.random_range(-0.04..0.04);
                let v = if inside { fill[c] + noise } else { base[c] + texture + noise };
                data[c * plane + i] = quantize(v);
            }
        }
    }
    SyntheticSample {
        image: Tensor::new(Shape::new(1, 3, size, size), data).expect("synthetic dims"),
        mask,
        ellipse,
    }
}

/// A corrupted prediction of `mask`: 0.5 ± `confidence` on the correct side,
/// plus uniform noise in ±`noise`, clamped to [0.02, 0.98].
pub fn noisy_probability(mask: &BinaryMask, confidence: f64, noise: f64, seed: u64) -> ProbabilityMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = mask
        .bits()
        .iter()
        .map(|&b| {
            let centre = if b { 0.5 + confidence } else { 0.5 - confidence };
            let jitter = if noise > 0.0 { rng.random_range(-noise..=noise) } else { 0.0 };
            (centre + jitter).clamp(0.02, 0.98)
        })
        .collect();
    ProbabilityMap::new(mask.height(), mask.width(), values).expect("mask dims")
}

/// `n` samples from a ChaCha8 stream seeded with `seed`.
pub fn synthesize(n: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::invalid("sample count must be at least 1"));
    }
    if size == 0 || size % 32 != 0 {
        return Err(Error::invalid(format!("size {size} is not a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| synthesize_sample(size, &mut rng)).collect())
}

pub fn sample_stem(index: usize) -> String {
    format!("synth_{index:04}")
}

/// Writes `images/<stem>.png` and `masks/<stem>_segmentation.png` under `out_dir`.
pub fn generate_synthetic_dataset(n: usize, size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetIndex> {
    let samples = synthesize(n, size, seed)?;
    let out_dir = out_dir.as_ref();
    let images = out_dir.join(IMAGES_DIR);
    let masks = out_dir.join(MASKS_DIR);
    for dir in [&images, &masks] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.as_path(), e))?;
    }
    for (i, sample) in samples.iter().enumerate() {
        let stem = sample_stem(i);
        save_image(images.join(format!("{stem}.png")), &sample.image)?;
        save_mask(masks.join(format!("{stem}{TRUTH_SUFFIX}.png")), &sample.mask)?;
    }
    DatasetIndex::scan(&images, Some(&masks))
}

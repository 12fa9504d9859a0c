//! Browser bindings: CRF refinement and mask cleanup on a synthetic scene,
//! and receptive fields of stacked dilated convolutions.

use lesionseg::crf::{crf_refine, CrfParams};
use lesionseg::pipeline::metrics::jaccard;
use lesionseg::pipeline::{noisy_probability, synthesize};
use lesionseg::postprocess::postprocess_stages;
use lesionseg::{BinaryMask, ConvSpec, ProbabilityMap, Shape, Tape, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: lesionseg::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn gray_rgba(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values
        .flat_map(|v| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b, b, b, 255]
        })
        .collect()
}

fn mask_values(mask: &BinaryMask) -> impl Iterator<Item = f64> + '_ {
    mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 })
}

/// A synthetic lesion image with a corrupted network-like prediction.
#[wasm_bindgen]
pub struct Scene {
    size: usize,
    image: Tensor,
    truth: BinaryMask,
    noisy: ProbabilityMap,
    refined: Option<ProbabilityMap>,
}

#[wasm_bindgen]
impl Scene {
    /// `size` must be a multiple of 32. `noise` is the half-width of the
    /// uniform corruption added to a 0.5 ± 0.15 prediction.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, noise: f64) -> Result<Scene, JsError> {
        let sample = synthesize(1, size, seed).map_err(js_err)?.remove(0);
        let noisy = noisy_probability(&sample.mask, 0.15, noise, seed ^ 0x9e37_79b9);
        Ok(Scene {
            size,
            image: sample.image,
            truth: sample.mask,
            noisy,
            refined: None,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        let plane = self.size * self.size;
        let d = self.image.data();
        (0..plane)
            .flat_map(|i| {
                let b = |c: usize| (d[c * plane + i] * 255.0).round() as u8;
                [b(0), b(1), b(2), 255]
            })
            .collect()
    }

    pub fn truth_rgba(&self) -> Vec<u8> {
        gray_rgba(mask_values(&self.truth))
    }

    pub fn noisy_rgba(&self) -> Vec<u8> {
        gray_rgba(self.noisy.values().iter().copied())
    }

    /// Runs mean-field refinement and returns the refined map as RGBA.
    #[allow(clippy::too_many_arguments)]
    pub fn refine(
        &mut self,
        omega1: f64,
        omega2: f64,
        sigma_alpha: f64,
        sigma_beta: f64,
        sigma_gamma: f64,
        iterations: usize,
        window: usize,
    ) -> Result<Vec<u8>, JsError> {
        let params = CrfParams {
            omega1,
            omega2,
            sigma_alpha,
            sigma_beta,
            sigma_gamma,
            iterations,
            window: Some(window),
            ..CrfParams::default()
        };
        let refined = crf_refine(&self.noisy, &self.image, &params).map_err(js_err)?;
        let out = gray_rgba(refined.values().iter().copied());
        self.refined = Some(refined);
        Ok(out)
    }

    /// Thresholds and cleans the refined map (or the noisy one before any
    /// refinement) and scores the result against the scene truth.
    pub fn postprocess(&self, se_radius: usize, use_refined: bool) -> Result<Cleanup, JsError> {
        let map = match (&self.refined, use_refined) {
            (Some(r), true) => r,
            _ => &self.noisy,
        };
        let stages = postprocess_stages(map, se_radius).map_err(js_err)?;
        let score = jaccard(&stages.primary, &self.truth).map_err(js_err)?;
        let binary_score = jaccard(&stages.binary, &self.truth).map_err(js_err)?;
        Ok(Cleanup {
            threshold: stages.threshold,
            jaccard: score,
            binary_jaccard: binary_score,
            binary: gray_rgba(mask_values(&stages.binary)),
            mask: gray_rgba(mask_values(&stages.primary)),
        })
    }
}

/// Result of [`Scene::postprocess`].
#[wasm_bindgen]
pub struct Cleanup {
    threshold: f64,
    jaccard: f64,
    binary_jaccard: f64,
    binary: Vec<u8>,
    mask: Vec<u8>,
}

#[wasm_bindgen]
impl Cleanup {
    #[wasm_bindgen(getter)]
    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Jaccard of the final mask against the scene truth.
    #[wasm_bindgen(getter)]
    pub fn jaccard(&self) -> f64 {
        self.jaccard
    }

    /// Jaccard of the raw thresholded mask, before cleanup.
    #[wasm_bindgen(getter)]
    pub fn binary_jaccard(&self) -> f64 {
        self.binary_jaccard
    }

    pub fn binary_rgba(&self) -> Vec<u8> {
        self.binary.clone()
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        self.mask.clone()
    }
}

/// Sensitivity of the center output of a stack of 3x3 convolutions (one per
/// entry of `dilations`, all-ones kernels) to each input pixel, scaled so
/// the largest value is 1. Row-major `size` x `size`.
pub fn receptive_field_map(dilations: &[usize], size: usize) -> lesionseg::Result<Vec<f64>> {
    if size == 0 || size % 2 == 0 {
        return Err(lesionseg::Error::invalid("size must be odd"));
    }
    let mut tape = Tape::new();
    let input = tape.leaf(Tensor::zeros(Shape::new(1, 1, size, size)), true);
    let mut x = input;
    for &d in dilations {
        if d == 0 {
            return Err(lesionseg::Error::invalid("dilation must be >= 1"));
        }
        let k = tape.leaf(Tensor::full(Shape::new(1, 1, 3, 3), 1.0), false);
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 1, 1, 1)), false);
        let spec = ConvSpec::new(Shape::new(1, 1, 3, 3)).padding(d).dilation(d);
        x = tape.conv2d(x, k, b, spec)?;
    }
    let mut pick = Tensor::zeros(Shape::new(1, 1, size, size));
    pick.set(0, 0, size / 2, size / 2, 1.0);
    let pick = tape.leaf(pick, false);
    let center = tape.mul(x, pick)?;
    let loss = tape.sum(center);
    tape.backward(loss)?;
    let g = tape.grad(input).into_data();
    let max = g.iter().copied().fold(0.0, f64::max);
    Ok(if max > 0.0 { g.into_iter().map(|v| v / max).collect() } else { g })
}

/// [`receptive_field_map`] as RGBA, from a comma-separated dilation list.
#[wasm_bindgen]
pub fn receptive_field_rgba(dilations: &str, size: usize) -> Result<Vec<u8>, JsError> {
    let parsed: Vec<usize> = dilations
        .split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| JsError::new(&format!("bad dilation `{s}`"))))
        .collect::<Result<_, _>>()?;
    let map = receptive_field_map(&parsed, size).map_err(js_err)?;
    Ok(map
        .into_iter()
        .flat_map(|v| {
            let heat = (v.sqrt() * 255.0).round() as u8;
            [heat, (heat as f64 * 0.6) as u8, 255 - heat, 255]
        })
        .collect())
}

//! Fully connected two-label CRF over image pixels, refined by mean-field
//! inference.
//!
//! The pairwise term between pixels i and j is μ(y_i, y_j) · k(i, j) with
//!
//! ```text
//! k(i, j) = ω1 · exp(−|p_i − p_j|² / 2σα² − |I_i − I_j|² / 2σβ²)
//!         + ω2 · exp(−|p_i − p_j|² / 2σγ²)
//! ```
//!
//! where p are pixel positions and I are RGB colors on a 0..255 scale.

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, ProbabilityMap};
use crate::tensor::Tensor;

pub const BACKGROUND: usize = 0;
pub const SALIENT: usize = 1;

/// Probabilities are clamped to [1e-6, 1 − 1e-6] before taking logs.
pub const UNARY_CLAMP: f64 = 1e-6;

/// Label compatibility μ(a, b).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Compatibility {
    /// μ(a, b) = [a ≠ b].
    Potts,
    Matrix([[f64; 2]; 2]),
}

impl Compatibility {
    pub fn mu(&self, a: usize, b: usize) -> f64 {
        match self {
            Compatibility::Potts => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
            Compatibility::Matrix(m) => m[a][b],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub omega1: f64,
    pub omega2: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub sigma_gamma: f64,
    pub iterations: usize,
    pub compatibility: Compatibility,
    /// Restrict messages to a (2r+1)² window around each pixel. `None`
    /// evaluates every pair.
    pub window: Option<usize>,
}

impl Default for CrfParams {
    fn default() -> Self {
        Self {
            omega1: 3.0,
            omega2: 5.0,
            sigma_alpha: 3.0,
            sigma_beta: 60.0,
            sigma_gamma: 3.0,
            iterations: 10,
            compatibility: Compatibility::Potts,
            window: None,
        }
    }
}

impl CrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma_alpha", self.sigma_alpha),
            ("sigma_beta", self.sigma_beta),
            ("sigma_gamma", self.sigma_gamma),
        ] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {s}")));
            }
        }
        for (name, w) in [("omega1", self.omega1), ("omega2", self.omega2)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("{name} must be >= 0, got {w}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::invalid("mean-field needs at least one iteration"));
        }
        Ok(())
    }

    /// Kernel value for precomputed squared distances.
    #[inline]
    pub fn kernel(&self, position_sq: f64, color_sq: f64) -> f64 {
        let appearance = -position_sq / (2.0 * self.sigma_alpha * self.sigma_alpha)
            - color_sq / (2.0 * self.sigma_beta * self.sigma_beta);
        let smoothness = -position_sq / (2.0 * self.sigma_gamma * self.sigma_gamma);
        self.omega1 * appearance.exp() + self.omega2 * smoothness.exp()
    }
}

/// Positions and colors of every pixel on a `width` x `height` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    width: usize,
    height: usize,
    positions: Vec<[f64; 2]>,
    colors: Vec<[f64; 3]>,
}

impl PixelFeatures {
    /// `colors` on a 0..255 scale, row-major.
    pub fn new(height: usize, width: usize, colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.len() != width * height || colors.is_empty() {
            return Err(Error::DataLength {
                expected: width * height,
                actual: colors.len(),
            });
        }
        let positions = (0..height)
            .flat_map(|y| (0..width).map(move |x| [x as f64, y as f64]))
            .collect();
        Ok(Self {
            width,
            height,
            positions,
            colors,
        })
    }

    /// From a (1, 3, h, w) image in [0, 1].
    pub fn from_rgb(image: &Tensor) -> Result<Self> {
        let s = image.shape();
        if s.batch != 1 || s.channels != 3 {
            return Err(Error::invalid(format!("expected a (1, 3, h, w) image, got {s}")));
        }
        let plane = s.plane();
        let d = image.data();
        let colors = (0..plane)
            .map(|i| [d[i] * 255.0, d[plane + i] * 255.0, d[2 * plane + i] * 255.0])
            .collect();
        Self::new(s.height, s.width, colors)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn position(&self, i: usize) -> [f64; 2] {
        self.positions[i]
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors[i]
    }

    fn distances(&self, i: usize, j: usize) -> (f64, f64) {
        let (pi, pj) = (self.positions[i], self.positions[j]);
        let (ci, cj) = (self.colors[i], self.colors[j]);
        let dp = (pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2);
        let dc = (ci[0] - cj[0]).powi(2) + (ci[1] - cj[1]).powi(2) + (ci[2] - cj[2]).powi(2);
        (dp, dc)
    }
}

/// Per-pixel label costs ψ_u(i, l), indexed `[BACKGROUND, SALIENT]`.
#[derive(Clone, Debug, PartialEq)]
pub struct UnaryField {
    pub costs: Vec<[f64; 2]>,
}

impl UnaryField {
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }
}

/// Approximate posterior Q, one distribution over {background, salient} per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalField {
    pub q: Vec<[f64; 2]>,
}

impl MarginalField {
    pub fn salient(&self) -> Vec<f64> {
        self.q.iter().map(|q| q[SALIENT]).collect()
    }

    /// Per-pixel argmax; ties go to background.
    pub fn map_labeling(&self, height: usize, width: usize) -> Result<BinaryMask> {
        BinaryMask::new(height, width, self.q.iter().map(|q| q[SALIENT] > q[BACKGROUND]).collect())
    }
}

/// ψ_u(i, salient) = −ln p_i, ψ_u(i, background) = −ln(1 − p_i).
pub fn unary_from_probability(prob: &ProbabilityMap) -> UnaryField {
    let costs = prob
        .values()
        .iter()
        .map(|&p| {
            let p = p.clamp(UNARY_CLAMP, 1.0 - UNARY_CLAMP);
            [-(1.0 - p).ln(), -p.ln()]
        })
        .collect();
    UnaryField { costs }
}

/// k(i, j) for two distinct pixels.
pub fn pairwise_weight(i: usize, j: usize, features: &PixelFeatures, params: &CrfParams) -> Result<f64> {
    if i == j {
        return Err(Error::invalid("pairwise weight of a pixel with itself is undefined"));
    }
    if i >= features.len() || j >= features.len() {
        return Err(Error::invalid(format!(
            "pixel index out of range for {} pixels",
            features.len()
        )));
    }
    let (dp, dc) = features.distances(i, j);
    Ok(params.kernel(dp, dc))
}

fn softmax_neg(energy: [f64; 2]) -> [f64; 2] {
    let m = energy[0].min(energy[1]);
    let e0 = (-(energy[0] - m)).exp();
    let e1 = (-(energy[1] - m)).exp();
    let z = e0 + e1;
    [e0 / z, e1 / z]
}

fn check_sizes(unary: &UnaryField, features: &PixelFeatures) -> Result<()> {
    if unary.len() != features.len() {
        return Err(Error::ShapeMismatch {
            op: "mean_field_inference",
            dimension: "pixel count",
            expected: features.len(),
            actual: unary.len(),
        });
    }
    Ok(())
}

/// Synchronous mean-field updates for exactly `params.iterations` rounds,
/// starting from the softmax of the negated unaries.
pub fn mean_field_inference(unary: &UnaryField, features: &PixelFeatures, params: &CrfParams) -> Result<MarginalField> {
    mean_field_inference_observed(unary, features, params, |_, _| {})
}

/// As [`mean_field_inference`], calling `observe(round, &Q)` after the
/// initialization (round 0) and after every update round.
pub fn mean_field_inference_observed(
    unary: &UnaryField,
    features: &PixelFeatures,
    params: &CrfParams,
    mut observe: impl FnMut(usize, &MarginalField),
) -> Result<MarginalField> {
    params.validate()?;
    check_sizes(unary, features)?;
    let n = unary.len();
    let mut field = MarginalField {
        q: unary.costs.iter().map(|&u| softmax_neg(u)).collect(),
    };
    observe(0, &field);
    let mu = |a, b| params.compatibility.mu(a, b);
    let mut next = vec![[0.0; 2]; n];
    for round in 1..=params.iterations {
        for (i, slot) in next.iter_mut().enumerate() {
            // s[l'] = Σ_j k(i, j) Q_j(l')
            let mut s = [0.0; 2];
            let mut add = |j: usize| {
                let (dp, dc) = features.distances(i, j);
                let k = params.kernel(dp, dc);
                s[0] += k * field.q[j][0];
                s[1] += k * field.q[j][1];
            };
            match params.window {
                None => {
                    for j in (0..n).filter(|&j| j != i) {
                        add(j);
                    }
                }
                Some(r) => {
                    let (w, h) = (features.width, features.height);
                    let (x, y) = (i % w, i / w);
                    for yy in y.saturating_sub(r)..=(y + r).min(h - 1) {
                        for xx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                            let j = yy * w + xx;
                            if j != i {
                                add(j);
                            }
                        }
                    }
                }
            }
            let message = [
                mu(0, 0) * s[0] + mu(0, 1) * s[1],
                mu(1, 0) * s[0] + mu(1, 1) * s[1],
            ];
            let u = unary.costs[i];
            *slot = softmax_neg([u[0] + message[0], u[1] + message[1]]);
        }
        std::mem::swap(&mut field.q, &mut next);
        observe(round, &field);
    }
    Ok(field)
}

/// E(y) = Σ_i ψ_u(i, y_i) + Σ_{i<j} μ(y_i, y_j) k(i, j).
pub fn exact_energy(labeling: &BinaryMask, unary: &UnaryField, features: &PixelFeatures, params: &CrfParams) -> Result<f64> {
    check_sizes(unary, features)?;
    if labeling.bits().len() != unary.len() {
        return Err(Error::ShapeMismatch {
            op: "exact_energy",
            dimension: "pixel count",
            expected: unary.len(),
            actual: labeling.bits().len(),
        });
    }
    let labels: Vec<usize> = labeling.bits().iter().map(|&b| b as usize).collect();
    let mut energy: f64 = labels.iter().zip(&unary.costs).map(|(&l, u)| u[l]).sum();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let mu = params.compatibility.mu(labels[i], labels[j]);
            if mu != 0.0 {
                let (dp, dc) = features.distances(i, j);
                energy += mu * params.kernel(dp, dc);
            }
        }
    }
    Ok(energy)
}

/// Network probability plus image colors in, posterior Q(salient) out.
pub fn crf_refine(prob: &ProbabilityMap, rgb: &Tensor, params: &CrfParams) -> Result<ProbabilityMap> {
    let s = rgb.shape();
    if s.height != prob.height() || s.width != prob.width() {
        return Err(Error::invalid(format!(
            "image is {}x{} but probability map is {}x{}",
            s.height,
            s.width,
            prob.height(),
            prob.width()
        )));
    }
    let features = PixelFeatures::from_rgb(rgb)?;
    let unary = unary_from_probability(prob);
    let field = mean_field_inference(&unary, &features, params)?;
    let (sh, sw) = prob.source_size();
    Ok(ProbabilityMap::new(prob.height(), prob.width(), field.salient())?.with_source_size(sh, sw))
}

//! Binarization and mask cleanup: Otsu threshold, square-window closing,
//! hole filling and single-region selection.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::maps::{BinaryMask, ProbabilityMap};

pub const HISTOGRAM_BINS: usize = 256;

/// Bin of a probability: bin b holds (b/256, (b+1)/256], with 0 itself in bin 0.
pub fn histogram_bin(p: f64) -> usize {
    let b = (p * HISTOGRAM_BINS as f64).ceil() as i64 - 1;
    b.clamp(0, HISTOGRAM_BINS as i64 - 1) as usize
}

/// Threshold value that separates bins `..=t` from bins `t+1..`.
pub fn bin_upper_edge(t: usize) -> f64 {
    (t + 1) as f64 / HISTOGRAM_BINS as f64
}

/// Between-class variance (up to the constant 1/N²) of a split with class
/// sizes `n0`, `n1` and bin-index sums `s0`, `s1`.
pub fn between_class_variance(n0: u64, s0: u64, n1: u64, s1: u64) -> f64 {
    let m0 = s0 as f64 / n0 as f64;
    let m1 = s1 as f64 / n1 as f64;
    n0 as f64 * n1 as f64 * (m0 - m1) * (m0 - m1)
}

/// Otsu threshold over a 256-bin histogram of [0, 1]. Pixels strictly above
/// the returned threshold are foreground. Ties go to the lowest threshold.
/// When every pixel falls in one bin there is no split; the threshold is
/// then the largest value and the mask is empty.
pub fn otsu_threshold(prob: &ProbabilityMap) -> (f64, BinaryMask) {
    let mut hist = [0u64; HISTOGRAM_BINS];
    for &p in prob.values() {
        hist[histogram_bin(p)] += 1;
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();

    let mut best: Option<(usize, f64)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for (t, &count) in hist.iter().enumerate().take(HISTOGRAM_BINS - 1) {
        n0 += count;
        s0 += t as u64 * count;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let var = between_class_variance(n0, s0, n1, total_sum - s0);
        if best.is_none_or(|(_, v)| var > v) {
            best = Some((t, var));
        }
    }

    let threshold = match best {
        Some((t, _)) => bin_upper_edge(t),
        None => prob.values().iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let bits = prob.values().iter().map(|&p| p > threshold).collect();
    let mask = BinaryMask::new(prob.height(), prob.width(), bits).expect("map dims");
    (threshold, mask)
}

/// Square structuring element of side 2r + 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    radius: usize,
}

impl StructuringElement {
    pub fn square(radius: usize) -> Result<Self> {
        if radius == 0 {
            return Err(Error::invalid("structuring element radius must be >= 1"));
        }
        Ok(Self { radius })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }
}

impl Default for StructuringElement {
    fn default() -> Self {
        Self { radius: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MorphOp {
    Dilate,
    Erode,
    Close,
}

/// Set if any in-image pixel of the window is set.
pub fn dilate(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    window_filter(mask, se.radius, |_, window_any| window_any)
}

/// Set if every in-image pixel of the window is set. Pixels outside the
/// image do not constrain the result, which keeps erosion the adjoint of
/// dilation on the finite grid.
pub fn erode(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    window_filter(mask, se.radius, |window_all, _| window_all)
}

pub fn close(mask: &BinaryMask, se: StructuringElement) -> BinaryMask {
    erode(&dilate(mask, se), se)
}

pub fn morphology(mask: &BinaryMask, se: StructuringElement, op: MorphOp) -> BinaryMask {
    match op {
        MorphOp::Dilate => dilate(mask, se),
        MorphOp::Erode => erode(mask, se),
        MorphOp::Close => close(mask, se),
    }
}

/// Separable square-window filter: a row pass then a column pass, each
/// tracking (all set, any set) over the clipped window.
fn window_filter(mask: &BinaryMask, r: usize, pick: impl Fn(bool, bool) -> bool) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let bits = mask.bits();
    // Per-row prefix counts make each window query O(1).
    let mut row_all = vec![false; w * h];
    let mut row_any = vec![false; w * h];
    for y in 0..h {
        let row = &bits[y * w..(y + 1) * w];
        let mut prefix = vec![0usize; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x] as usize;
        }
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            let set = prefix[hi + 1] - prefix[lo];
            row_all[y * w + x] = set == hi - lo + 1;
            row_any[y * w + x] = set > 0;
        }
    }
    let mut col_all = vec![0usize; h + 1];
    let mut col_any = vec![0usize; h + 1];
    let mut result = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            col_all[y + 1] = col_all[y] + row_all[y * w + x] as usize;
            col_any[y + 1] = col_any[y] + row_any[y * w + x] as usize;
        }
        for y in 0..h {
            let (lo, hi) = (y.saturating_sub(r), (y + r).min(h - 1));
            let all = col_all[hi + 1] - col_all[lo] == hi - lo + 1;
            let any = col_any[hi + 1] - col_any[lo] > 0;
            result[y * w + x] = pick(all, any);
        }
    }
    BinaryMask::new(h, w, result).expect("mask dims")
}

/// Background regions not 4-connected to the image border become foreground.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    let seed = |x: usize, y: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
        let i = y * w + x;
        if !mask.get(x, y) && !outside[i] {
            outside[i] = true;
            queue.push_back((x, y));
        }
    };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut queue);
        seed(x, h - 1, &mut outside, &mut queue);
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut queue);
        seed(w - 1, y, &mut outside, &mut queue);
    }
    while let Some((x, y)) = queue.pop_front() {
        if x > 0 {
            seed(x - 1, y, &mut outside, &mut queue);
        }
        if x + 1 < w {
            seed(x + 1, y, &mut outside, &mut queue);
        }
        if y > 0 {
            seed(x, y - 1, &mut outside, &mut queue);
        }
        if y + 1 < h {
            seed(x, y + 1, &mut outside, &mut queue);
        }
    }
    BinaryMask::new(h, w, outside.into_iter().map(|o| !o).collect()).expect("mask dims")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentStats {
    pub id: usize,
    pub area: usize,
    /// (x, y) mean pixel coordinate.
    pub centroid: (f64, f64),
    /// Centroid distance to the image center over the half-diagonal, in [0, 1].
    pub center_distance: f64,
}

/// 8-connected foreground components. Ids follow the raster order of each
/// component's first pixel. Returns per-pixel labels alongside the stats.
pub fn label_components(mask: &BinaryMask) -> (Vec<Option<usize>>, Vec<ComponentStats>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![None; w * h];
    let mut stats = Vec::new();
    let center = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let half_diag = (((w - 1) * (w - 1) + (h - 1) * (h - 1)) as f64).sqrt() / 2.0;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits()[start] || labels[start].is_some() {
            continue;
        }
        let id = stats.len();
        labels[start] = Some(id);
        stack.push(start);
        let (mut area, mut sx, mut sy) = (0usize, 0u64, 0u64);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            sx += x as u64;
            sy += y as u64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if mask.get_signed(nx, ny) {
                        let j = ny as usize * w + nx as usize;
                        if labels[j].is_none() {
                            labels[j] = Some(id);
                            stack.push(j);
                        }
                    }
                }
            }
        }
        let centroid = (sx as f64 / area as f64, sy as f64 / area as f64);
        let dist = ((centroid.0 - center.0).powi(2) + (centroid.1 - center.1).powi(2)).sqrt();
        let center_distance = if half_diag > 0.0 { (dist / half_diag).min(1.0) } else { 0.0 };
        stats.push(ComponentStats {
            id,
            area,
            centroid,
            center_distance,
        });
    }
    (labels, stats)
}

pub fn connected_components(mask: &BinaryMask) -> Vec<ComponentStats> {
    label_components(mask).1
}

/// Score used to pick the single surviving region: area · (1 − distance).
pub fn region_score(c: &ComponentStats) -> f64 {
    c.area as f64 * (1.0 - c.center_distance)
}

/// Keeps only the component with the highest [`region_score`]; ties go to
/// the smaller id.
pub fn select_primary_region(mask: &BinaryMask) -> BinaryMask {
    let (labels, stats) = label_components(mask);
    let mut best: Option<(usize, f64)> = None;
    for c in &stats {
        let s = region_score(c);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c.id, s));
        }
    }
    let keep = best.map(|(id, _)| id);
    let bits = labels.into_iter().map(|l| l.is_some() && l == keep).collect();
    BinaryMask::new(mask.height(), mask.width(), bits).expect("mask dims")
}

/// Intermediate masks of [`postprocess_pipeline`].
#[derive(Clone, Debug, PartialEq)]
pub struct PostprocessStages {
    pub threshold: f64,
    pub binary: BinaryMask,
    pub closed: BinaryMask,
    pub filled: BinaryMask,
    pub primary: BinaryMask,
}

/// Otsu threshold, closing, hole filling, primary-region selection.
pub fn postprocess_stages(prob: &ProbabilityMap, se_radius: usize) -> Result<PostprocessStages> {
    let se = StructuringElement::square(se_radius)?;
    let (threshold, binary) = otsu_threshold(prob);
    let closed = close(&binary, se);
    let filled = fill_holes(&closed);
    let primary = select_primary_region(&filled);
    Ok(PostprocessStages {
        threshold,
        binary,
        closed,
        filled,
        primary,
    })
}

pub fn postprocess_pipeline(prob: &ProbabilityMap, se_radius: usize) -> Result<BinaryMask> {
    Ok(postprocess_stages(prob, se_radius)?.primary)
}

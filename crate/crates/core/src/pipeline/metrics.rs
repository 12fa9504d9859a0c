//! Overlap scores and per-dataset reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::maps::BinaryMask;
use crate::pipeline::dataset::files_by_stem;
use crate::pipeline::io::load_mask;
use crate::pipeline::resize::resize_mask;

/// Scores below this count as zero in the thresholded mean.
pub const JACCARD_CUTOFF: f64 = 0.65;

fn overlap(pred: &BinaryMask, truth: &BinaryMask) -> Result<(usize, usize, usize)> {
    if !pred.same_size(truth) {
        return Err(Error::invalid(format!(
            "mask sizes differ: {}x{} vs {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let inter = pred.bits().iter().zip(truth.bits()).filter(|(a, b)| **a && **b).count();
    Ok((inter, pred.count(), truth.count()))
}

/// |A ∩ B| / |A ∪ B|; two empty masks score 1.
pub fn jaccard(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    let (inter, a, b) = overlap(pred, truth)?;
    let union = a + b - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// 2|A ∩ B| / (|A| + |B|); two empty masks score 1.
pub fn dice(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    let (inter, a, b) = overlap(pred, truth)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * inter as f64 / (a + b) as f64 })
}

pub fn thresholded_jaccard(j: f64) -> f64 {
    if j < JACCARD_CUTOFF {
        0.0
    } else {
        j
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub stem: String,
    pub jaccard: f64,
    pub dice: f64,
}

impl ImageScore {
    pub fn compute(stem: impl Into<String>, pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        Ok(Self {
            stem: stem.into(),
            jaccard: jaccard(pred, truth)?,
            dice: dice(pred, truth)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Sorted by stem.
    pub scores: Vec<ImageScore>,
    pub mean_jaccard: f64,
    pub mean_dice: f64,
    pub mean_thresholded_jaccard: f64,
}

impl MetricsReport {
    pub fn new(mut scores: Vec<ImageScore>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no predictions to score"));
        }
        scores.sort_by(|a, b| a.stem.cmp(&b.stem));
        let n = scores.len() as f64;
        let mean = |f: &dyn Fn(&ImageScore) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let mean_jaccard = mean(&|s| s.jaccard);
        let mean_dice = mean(&|s| s.dice);
        let mean_thresholded_jaccard = mean(&|s| thresholded_jaccard(s.jaccard));
        Ok(Self {
            scores,
            mean_jaccard,
            mean_dice,
            mean_thresholded_jaccard,
        })
    }

    pub fn count(&self) -> usize {
        self.scores.len()
    }

    /// `stem,jaccard,dice` rows followed by `mean`, `thresholded_mean` and
    /// `count` summary rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stem,jaccard,dice\n");
        for s in &self.scores {
            writeln!(out, "{},{:.6},{:.6}", s.stem, s.jaccard, s.dice).unwrap();
        }
        writeln!(out, "mean,{:.6},{:.6}", self.mean_jaccard, self.mean_dice).unwrap();
        writeln!(out, "thresholded_mean,{:.6},", self.mean_thresholded_jaccard).unwrap();
        writeln!(out, "count,{},", self.count()).unwrap();
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.scores.iter().map(|s| s.stem.len()).max().unwrap_or(0).max(16);
        let mut out = format!("{:<width$}  {:>8}  {:>8}\n", "image", "jaccard", "dice");
        for s in &self.scores {
            writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}", s.stem, s.jaccard, s.dice).unwrap();
        }
        writeln!(out, "{:<width$}  {:>8.4}  {:>8.4}", "mean", self.mean_jaccard, self.mean_dice).unwrap();
        writeln!(out, "{:<width$}  {:>8.4}", "thresholded mean", self.mean_thresholded_jaccard).unwrap();
        writeln!(out, "{:<width$}  {:>8}", "count", self.count()).unwrap();
        out
    }
}

/// Scores one prediction against its truth. A prediction at a different
/// size is first brought to the truth size by nearest-neighbor resampling.
pub fn score_at_truth_size(stem: &str, pred: &BinaryMask, truth: &BinaryMask) -> Result<ImageScore> {
    if pred.same_size(truth) {
        ImageScore::compute(stem, pred, truth)
    } else {
        let pred = resize_mask(pred, truth.height(), truth.width())?;
        ImageScore::compute(stem, &pred, truth)
    }
}

/// Scores every mask in `pred_dir` against the same-stem mask in `truth_dir`.
pub fn evaluate_dataset(pred_dir: &Path, truth_dir: &Path) -> Result<MetricsReport> {
    let preds = files_by_stem(pred_dir)?;
    if preds.is_empty() {
        return Err(Error::invalid(format!("no predictions in {}", pred_dir.display())));
    }
    let truths = files_by_stem(truth_dir)?;
    let missing: Vec<String> = preds.keys().filter(|s| !truths.contains_key(*s)).cloned().collect();
    if !missing.is_empty() {
        return Err(Error::MissingTruth(missing));
    }
    let mut scores = Vec::with_capacity(preds.len());
    for (stem, path) in &preds {
        let pred = load_mask(path)?;
        let truth = load_mask(&truths[stem])?;
        scores.push(score_at_truth_size(stem, &pred, &truth)?);
    }
    MetricsReport::new(scores)
}

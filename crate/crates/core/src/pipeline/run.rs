//! Stage chain: resample → network → CRF → postprocess → restore size.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::crf::{crf_refine, CrfParams};
use crate::error::{Error, Result};
use crate::maps::{BinaryMask, ProbabilityMap};
use crate::network::{load_checkpoint, save_checkpoint, NetworkParams};
use crate::pipeline::config::RunConfig;
use crate::pipeline::dataset::{files_by_stem, DatasetIndex, TRUTH_SUFFIX};
use crate::pipeline::io::{load_image, load_mask, load_probability, save_mask, save_probability};
use crate::pipeline::metrics::{score_at_truth_size, MetricsReport};
use crate::pipeline::resize::{resize_mask, resize_probability, resize_tensor, ResizeMode};
use crate::postprocess::{postprocess_stages, PostprocessStages};
use crate::tensor::Tensor;
use crate::trainer::{fit_from, TrainSample, TrainState};

pub const REPORT_FILE: &str = "report.csv";

/// `<stem>_segmentation.png`.
pub fn mask_file_name(stem: &str) -> String {
    format!("{stem}{TRUTH_SUFFIX}.png")
}

fn image_size(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    (s.height, s.width)
}

/// Bilinear resample of a (1, 3, h, w) image to `size` x `size`.
pub fn to_working_size(image: &Tensor, size: usize) -> Result<Tensor> {
    resize_tensor(image, size, size, ResizeMode::Bilinear)
}

/// Network probability at working resolution, tagged with the original size.
pub fn infer_working(params: &NetworkParams, image: &Tensor, size: usize) -> Result<ProbabilityMap> {
    let (h, w) = image_size(image);
    let working = to_working_size(image, size)?;
    Ok(params.infer_probability_map(&working)?.with_source_size(h, w))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub probability: ProbabilityMap,
    pub refined: Option<ProbabilityMap>,
    pub stages: PostprocessStages,
    /// Final mask at the original image size.
    pub mask: BinaryMask,
}

/// Full chain on one image. Everything up to the final mask runs at the
/// working size; the mask is then restored by nearest-neighbor resampling.
pub fn segment(params: &NetworkParams, image: &Tensor, cfg: &RunConfig) -> Result<Segmentation> {
    let (h, w) = image_size(image);
    let working = to_working_size(image, cfg.working_size)?;
    let probability = params.infer_probability_map(&working)?.with_source_size(h, w);
    let refined = if cfg.skip_crf {
        None
    } else {
        Some(crf_refine(&probability, &working, &cfg.crf)?)
    };
    let stages = postprocess_stages(refined.as_ref().unwrap_or(&probability), cfg.se_radius)?;
    let mask = resize_mask(&stages.primary, h, w)?;
    Ok(Segmentation {
        probability,
        refined,
        stages,
        mask,
    })
}

/// Loads image/truth pairs at the working size. Entries without a truth
/// mask or with undecodable files are skipped with a warning.
pub fn load_training_samples(index: &DatasetIndex, size: usize) -> Result<Vec<TrainSample>> {
    let mut samples = Vec::new();
    for entry in &index.entries {
        let Some(truth_path) = &entry.truth else {
            warn!("{}: no ground truth, skipped", entry.stem);
            continue;
        };
        let loaded = load_image(&entry.image).and_then(|img| Ok((img, load_mask(truth_path)?)));
        let (image, truth) = match loaded {
            Ok(pair) => pair,
            Err(e) => {
                warn!("{}: {e}; skipped", entry.stem);
                continue;
            }
        };
        let image = to_working_size(&image, size)?;
        let truth = resize_mask(&truth, size, size)?;
        let target = truth.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        samples.push(TrainSample::new(image, target)?);
    }
    if samples.is_empty() {
        return Err(Error::invalid("no usable training samples"));
    }
    Ok(samples)
}

/// Builds a network from the config and seed, trains it on `index`, and
/// writes the checkpoint when the config names one. Each iteration appends
/// an `iter<TAB>loss` line to `log`.
pub fn train(index: &DatasetIndex, cfg: &RunConfig, mut log: Option<&mut dyn Write>) -> Result<TrainState> {
    cfg.validate()?;
    let samples = load_training_samples(index, cfg.working_size)?;
    info!("training on {} samples at {}x{}", samples.len(), cfg.working_size, cfg.working_size);
    let params = NetworkParams::build(cfg.backbone(), cfg.seed)?;
    let mut state = TrainState::new(params);
    let sgd = cfg.sgd_config();
    let every = (sgd.iterations / 20).max(1);
    let mut log_error = None;
    fit_from(&mut state, &samples, &sgd, |it, loss| {
        if it % every == 0 {
            info!("iteration {it}: loss {loss:.4}");
        }
        if let Some(w) = log.as_mut() {
            if let Err(e) = writeln!(w, "{it}\t{loss}") {
                log_error.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = log_error {
        return Err(Error::invalid(format!("writing training log: {e}")));
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(&state.params, path)?;
    }
    Ok(state)
}

/// Loads the checkpoint named in the config.
pub fn load_network(cfg: &RunConfig) -> Result<NetworkParams> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::invalid("no checkpoint configured"))?;
    let mut params = load_checkpoint(path)?;
    params.set_aggregation(cfg.aggregation);
    Ok(params)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_report(report: &MetricsReport, dir: &Path) -> Result<PathBuf> {
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BatchSummary {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<String>,
    pub report: Option<MetricsReport>,
}

/// Segments every image in `input_dir` into `output_dir`. With a truth
/// directory, scores each mask at the original size and writes `report.csv`.
pub fn run_pipeline(
    params: &NetworkParams,
    cfg: &RunConfig,
    input_dir: &Path,
    output_dir: &Path,
    truth_dir: Option<&Path>,
) -> Result<BatchSummary> {
    cfg.validate()?;
    let index = DatasetIndex::scan(input_dir, truth_dir)?;
    if truth_dir.is_some() {
        let missing: Vec<String> = index
            .entries
            .iter()
            .filter(|e| e.truth.is_none())
            .map(|e| e.stem.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTruth(missing));
        }
    }
    create_dir(output_dir)?;
    let mut summary = BatchSummary::default();
    let mut scores = Vec::new();
    for entry in &index.entries {
        let image = match load_image(&entry.image) {
            Ok(img) => img,
            Err(e) => {
                warn!("{e}; skipped");
                summary.skipped.push(entry.stem.clone());
                continue;
            }
        };
        let seg = segment(params, &image, cfg)?;
        let path = output_dir.join(mask_file_name(&entry.stem));
        save_mask(&path, &seg.mask)?;
        summary.written.push(path);
        if let Some(truth) = &entry.truth {
            scores.push(score_at_truth_size(&entry.stem, &seg.mask, &load_mask(truth)?)?);
        }
    }
    if truth_dir.is_some() {
        let report = MetricsReport::new(scores)?;
        write_report(&report, output_dir)?;
        summary.report = Some(report);
    }
    Ok(summary)
}

/// Writes `<stem>.png` probability maps restored to each image's size.
pub fn infer_dir(params: &NetworkParams, cfg: &RunConfig, input_dir: &Path, output_dir: &Path) -> Result<BatchSummary> {
    let index = DatasetIndex::scan(input_dir, None)?;
    create_dir(output_dir)?;
    let mut summary = BatchSummary::default();
    for entry in &index.entries {
        let image = match load_image(&entry.image) {
            Ok(img) => img,
            Err(e) => {
                warn!("{e}; skipped");
                summary.skipped.push(entry.stem.clone());
                continue;
            }
        };
        let (h, w) = image_size(&image);
        let prob = infer_working(params, &image, cfg.working_size)?;
        let restored = resize_probability(&prob, h, w, ResizeMode::Bilinear)?;
        let path = output_dir.join(format!("{}.png", entry.stem));
        save_probability(&path, &restored)?;
        summary.written.push(path);
    }
    Ok(summary)
}

/// CRF-refines each probability map in `prob_dir` using the same-stem
/// image from `image_dir`, resampled to the map size.
pub fn refine_dir(crf: &CrfParams, image_dir: &Path, prob_dir: &Path, output_dir: &Path) -> Result<BatchSummary> {
    let images = DatasetIndex::scan(image_dir, None)?;
    let probs = files_by_stem(prob_dir)?;
    create_dir(output_dir)?;
    let mut summary = BatchSummary::default();
    for entry in &images.entries {
        let Some(prob_path) = probs.get(&entry.stem) else {
            continue;
        };
        let loaded = load_image(&entry.image).and_then(|img| Ok((img, load_probability(prob_path)?)));
        let (image, prob) = match loaded {
            Ok(pair) => pair,
            Err(e) => {
                warn!("{e}; skipped");
                summary.skipped.push(entry.stem.clone());
                continue;
            }
        };
        let image = resize_tensor(&image, prob.height(), prob.width(), ResizeMode::Bilinear)?;
        let refined = crf_refine(&prob, &image, crf)?;
        let path = output_dir.join(format!("{}.png", entry.stem));
        save_probability(&path, &refined)?;
        summary.written.push(path);
    }
    Ok(summary)
}

/// Binarizes and cleans each probability map in `prob_dir`.
pub fn postprocess_dir(se_radius: usize, prob_dir: &Path, output_dir: &Path) -> Result<BatchSummary> {
    let probs = files_by_stem(prob_dir)?;
    create_dir(output_dir)?;
    let mut summary = BatchSummary::default();
    for (stem, path) in &probs {
        let prob = match load_probability(path) {
            Ok(p) => p,
            Err(e) => {
                warn!("{e}; skipped");
                summary.skipped.push(stem.clone());
                continue;
            }
        };
        let mask = postprocess_stages(&prob, se_radius)?.primary;
        let out = output_dir.join(mask_file_name(stem));
        save_mask(&out, &mask)?;
        summary.written.push(out);
    }
    Ok(summary)
}

/// Scores `pred_dir` against `truth_dir` and writes `report.csv` into `report_dir`.
pub fn eval_dirs(pred_dir: &Path, truth_dir: &Path, report_dir: Option<&Path>) -> Result<MetricsReport> {
    let report = crate::pipeline::metrics::evaluate_dataset(pred_dir, truth_dir)?;
    if let Some(dir) = report_dir {
        create_dir(dir)?;
        write_report(&report, dir)?;
    }
    Ok(report)
}

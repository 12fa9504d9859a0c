mod common;

use std::path::Path;

use lesionseg::crf::{crf_refine, CrfParams};
use lesionseg::pipeline::dataset::{file_stem, DatasetIndex};
use lesionseg::pipeline::io::{load_image, load_mask, load_probability, save_image, save_mask, save_probability};
use lesionseg::pipeline::metrics::thresholded_jaccard;
use lesionseg::pipeline::resize::{nearest_source, resize_tensor};
use lesionseg::pipeline::run::{eval_dirs, infer_dir, mask_file_name, postprocess_dir, refine_dir, REPORT_FILE};
use lesionseg::pipeline::{
    dice, evaluate_dataset, generate_synthetic_dataset, jaccard, resize_mask, run_pipeline, segment, synthesize, ResizeMode,
    Ellipse, RunConfig,
};
use lesionseg::postprocess::postprocess_stages;
use lesionseg::{BackboneConfig, BinaryMask, Error, NetworkParams, ProbabilityMap, Shape, Tensor};
use proptest::prelude::*;

fn small_config() -> RunConfig {
    RunConfig {
        working_size: 64,
        ..RunConfig::default()
    }
}

fn net() -> NetworkParams {
    NetworkParams::build(BackboneConfig::desk().with_input_size(64, 64), 21).unwrap()
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn rasterized_ellipse_matches_the_quadratic_form() {
    let e = Ellipse {
        center: (20.3, 17.8),
        semi_axes: (11.0, 5.5),
        angle: 0.7,
    };
    // x^T R diag(1/a², 1/b²) R^T x ≤ 1 written out as A dx² + B dx dy + C dy² ≤ 1.
    let (s, c) = e.angle.sin_cos();
    let (ia, ib) = (1.0 / (e.semi_axes.0 * e.semi_axes.0), 1.0 / (e.semi_axes.1 * e.semi_axes.1));
    let a = c * c * ia + s * s * ib;
    let b = 2.0 * s * c * (ia - ib);
    let cc = s * s * ia + c * c * ib;
    let mask = e.rasterize(40);
    let mut disagreements = 0;
    for y in 0..40 {
        for x in 0..40 {
            let (dx, dy) = (x as f64 - e.center.0, y as f64 - e.center.1);
            let q = a * dx * dx + b * dx * dy + cc * dy * dy;
            if (q <= 1.0) != mask.get(x, y) {
                assert!((q - 1.0).abs() < 1e-12, "({x}, {y}) q = {q}");
                disagreements += 1;
            }
        }
    }
    assert_eq!(disagreements, 0);
    let area = mask.count() as f64;
    let exact = std::f64::consts::PI * 11.0 * 5.5;
    assert!((area - exact).abs() / exact < 0.1, "{area} vs {exact}");
}

#[test]
fn synthetic_samples_are_reproducible_and_contrasted() {
    let a = synthesize(5, 64, 33).unwrap();
    assert_eq!(a, synthesize(5, 64, 33).unwrap());
    assert_ne!(a, synthesize(5, 64, 34).unwrap());
    for s in &a {
        assert_eq!(s.mask, s.ellipse.rasterize(64));
        assert!(s.mask.count() > 0);
        let plane = 64 * 64;
        let mean = |inside: bool| {
            let idx: Vec<usize> = (0..plane).filter(|&i| s.mask.bits()[i] == inside).collect();
            idx.iter().map(|&i| s.image.data()[i]).sum::<f64>() / idx.len() as f64
        };
        assert!(mean(true) > mean(false) + 0.2);
    }
}

#[test]
fn generated_dataset_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    let index = generate_synthetic_dataset(3, 32, 8, dir.path()).unwrap();
    let samples = synthesize(3, 32, 8).unwrap();
    assert_eq!(index.len(), 3);
    assert_eq!(index, DatasetIndex::scan_root(dir.path()).unwrap());
    for (entry, sample) in index.entries.iter().zip(&samples) {
        let image = load_image(&entry.image).unwrap();
        assert_eq!(image.data(), sample.image.data());
        assert_eq!(load_mask(entry.truth.as_ref().unwrap()).unwrap(), sample.mask);
    }
}

#[test]
fn stems_pair_images_with_truths() {
    assert_eq!(file_stem(Path::new("a/ISIC_0000001.jpg")).as_deref(), Some("ISIC_0000001"));
    assert_eq!(file_stem(Path::new("ISIC_0000001_segmentation.png")).as_deref(), Some("ISIC_0000001"));
    assert_eq!(file_stem(Path::new("x.JPEG")).as_deref(), Some("x"));
    assert_eq!(file_stem(Path::new("notes.txt")), None);
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::zeros(Shape::new(1, 3, 4, 4));
    save_image(dir.path().join("b.png"), &img).unwrap();
    save_image(dir.path().join("a.png"), &img).unwrap();
    save_mask(dir.path().join("a_segmentation.png"), &BinaryMask::empty(4, 4)).unwrap();
    let index = DatasetIndex::scan(dir.path(), Some(dir.path())).unwrap();
    let stems: Vec<_> = index.entries.iter().map(|e| (e.stem.as_str(), e.truth.is_some())).collect();
    assert_eq!(stems, [("a", true), ("b", false)]);
    save_image(dir.path().join("a.jpg"), &img).unwrap();
    assert!(DatasetIndex::scan(dir.path(), None).is_err());
}

#[test]
fn segmentation_is_restored_to_the_source_size() {
    let image = synthesize(1, 64, 2).unwrap().remove(0).image;
    let odd = resize_tensor(&image, 50, 70, ResizeMode::Bilinear).unwrap();
    let cfg = small_config();
    let seg = segment(&net(), &odd, &cfg).unwrap();
    assert_eq!((seg.probability.height(), seg.probability.width()), (64, 64));
    assert_eq!(seg.probability.source_size(), (50, 70));
    assert_eq!((seg.mask.height(), seg.mask.width()), (50, 70));
    assert_eq!(seg.mask, resize_mask(&seg.stages.primary, 50, 70).unwrap());
    let refined = seg.refined.as_ref().unwrap();
    assert_eq!(refined.source_size(), (50, 70));
    let skip = segment(&net(), &odd, &RunConfig { skip_crf: true, ..cfg }).unwrap();
    assert!(skip.refined.is_none());
    assert_eq!(skip.stages, postprocess_stages(&skip.probability, 1).unwrap());
}

#[test]
fn default_working_size_accepts_any_image_size() {
    let image = synthesize(1, 32, 5).unwrap().remove(0).image;
    let cfg = RunConfig {
        skip_crf: true,
        ..RunConfig::default()
    };
    let params = NetworkParams::build(cfg.backbone(), 1).unwrap();
    let seg = segment(&params, &image, &cfg).unwrap();
    assert_eq!((seg.probability.height(), seg.probability.width()), (224, 224));
    assert_eq!((seg.mask.height(), seg.mask.width()), (32, 32));
}

#[test]
fn pipeline_writes_masks_and_a_report() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(3, 64, 40, dir.path()).unwrap();
    let (images, masks, out) = (dir.path().join("images"), dir.path().join("masks"), dir.path().join("out"));
    let summary = run_pipeline(&net(), &small_config(), &images, &out, Some(&masks)).unwrap();
    assert_eq!(summary.written.len(), 3);
    assert!(summary.skipped.is_empty());
    let want: Vec<String> = [REPORT_FILE.to_string()]
        .into_iter()
        .chain((0..3).map(|i| mask_file_name(&format!("synth_{i:04}"))))
        .collect();
    assert_eq!(names(&out), want);

    let report = summary.report.unwrap();
    let csv = std::fs::read_to_string(out.join(REPORT_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "stem,jaccard,dice");
    assert_eq!(lines.len(), 1 + 3 + 3);
    for (line, score) in lines[1..4].iter().zip(&report.scores) {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], score.stem);
        assert!((cols[1].parse::<f64>().unwrap() - score.jaccard).abs() <= 5e-7);
        assert!((cols[2].parse::<f64>().unwrap() - score.dice).abs() <= 5e-7);
    }
    assert_eq!(lines[6], "count,3,");

    // The written masks reproduce the in-memory report.
    assert_eq!(evaluate_dataset(&out, &masks).unwrap(), report);
}

#[test]
fn missing_truths_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(3, 32, 41, dir.path()).unwrap();
    let masks = dir.path().join("masks");
    std::fs::remove_file(masks.join("synth_0001_segmentation.png")).unwrap();
    let err = run_pipeline(&net(), &small_config(), &dir.path().join("images"), &dir.path().join("o"), Some(&masks))
        .unwrap_err();
    assert!(matches!(&err, Error::MissingTruth(s) if s == &["synth_0001".to_string()]), "{err}");

    let preds = dir.path().join("preds");
    std::fs::create_dir(&preds).unwrap();
    for stem in ["synth_0000", "synth_0001", "synth_0002", "extra"] {
        save_mask(preds.join(mask_file_name(stem)), &BinaryMask::empty(32, 32)).unwrap();
    }
    let err = evaluate_dataset(&preds, &masks).unwrap_err();
    assert!(matches!(&err, Error::MissingTruth(s) if s == &["extra".to_string(), "synth_0001".to_string()]), "{err}");
    assert!(err.to_string().contains("synth_0001"));
}

#[test]
fn staged_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic_dataset(2, 64, 42, dir.path()).unwrap();
    let images = dir.path().join("images");
    let masks = dir.path().join("masks");
    let cfg = small_config();
    let crf = CrfParams {
        window: Some(6),
        ..CrfParams::default()
    };

    let probs = dir.path().join("prob");
    assert_eq!(infer_dir(&net(), &cfg, &images, &probs).unwrap().written.len(), 2);
    let refined = dir.path().join("refined");
    refine_dir(&crf, &images, &probs, &refined).unwrap();
    let cleaned = dir.path().join("cleaned");
    postprocess_dir(2, &refined, &cleaned).unwrap();
    let reports = dir.path().join("reports");
    let report = eval_dirs(&cleaned, &masks, Some(&reports)).unwrap();
    assert_eq!(report.count(), 2);
    assert!(reports.join(REPORT_FILE).is_file());

    for stem in ["synth_0000", "synth_0001"] {
        let image = load_image(images.join(format!("{stem}.png"))).unwrap();
        let prob = load_probability(probs.join(format!("{stem}.png"))).unwrap();
        assert_eq!((prob.height(), prob.width()), (64, 64));
        let want_refined = crf_refine(&prob, &image, &crf).unwrap();
        let got_refined = load_probability(refined.join(format!("{stem}.png"))).unwrap();
        let quantized: Vec<f64> = want_refined.values().iter().map(|p| (p * 255.0).round() / 255.0).collect();
        assert_eq!(got_refined.values(), &quantized[..]);
        let want_mask = postprocess_stages(&got_refined, 2).unwrap().primary;
        assert_eq!(load_mask(cleaned.join(mask_file_name(stem))).unwrap(), want_mask);
    }
}

#[test]
fn probability_png_quantizes_to_the_byte_grid() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.png");
    let map = ProbabilityMap::new(1, 4, vec![0.0, 0.3, 0.501, 1.0]).unwrap();
    save_probability(&path, &map).unwrap();
    let back = load_probability(&path).unwrap();
    assert_eq!(back.values(), &[0.0, 77.0 / 255.0, 128.0 / 255.0, 1.0]);
}

#[test]
fn non_binary_masks_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.png");
    image::GrayImage::from_raw(2, 1, vec![0, 17]).unwrap().save(&path).unwrap();
    assert!(load_mask(&path).is_err());
}

#[test]
fn config_file_round_trips_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    let mut cfg = small_config();
    cfg.seed = 99;
    cfg.crf.window = None;
    cfg.input_dir = Some(dir.path().join("in"));
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, "working_size = 64\nworking_size = 96\n").unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config { line: 2, .. })));
    std::fs::write(&path, "window = 3\n").unwrap();
    assert!(matches!(RunConfig::load(&path), Err(Error::Config { line: 1, .. })));
}

fn mask_pair() -> impl Strategy<Value = (BinaryMask, BinaryMask)> {
    (1..=12usize, 1..=12usize).prop_flat_map(|(h, w)| {
        let bits = || proptest::collection::vec(any::<bool>(), h * w);
        (bits(), bits()).prop_map(move |(a, b)| (BinaryMask::new(h, w, a).unwrap(), BinaryMask::new(h, w, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn overlap_scores_match_set_counts((a, b) in mask_pair()) {
        let both = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
        let either = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x || **y).count();
        let j = jaccard(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        if either == 0 {
            prop_assert_eq!((j, d), (1.0, 1.0));
        } else {
            prop_assert_eq!(j, both as f64 / either as f64);
            prop_assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-15);
        }
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert!(d >= j);
        prop_assert!(thresholded_jaccard(j) == 0.0 || thresholded_jaccard(j) == j);
        prop_assert_eq!(thresholded_jaccard(j) == 0.0, j < 0.65);
    }

    #[test]
    fn nearest_resize_picks_covering_pixels(in_size in 1..=40usize, out_size in 1..=40usize) {
        let picks: Vec<usize> = (0..out_size).map(|o| nearest_source(o, in_size, out_size)).collect();
        prop_assert!(picks.iter().all(|&p| p < in_size));
        prop_assert!(picks.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(picks[0], 0);
        if out_size == in_size {
            prop_assert_eq!(picks, (0..in_size).collect::<Vec<_>>());
        }
    }

    #[test]
    fn integer_upscaling_then_downscaling_is_lossless((m, _) in mask_pair(), k in 1..=4usize) {
        let up = resize_mask(&m, m.height() * k, m.width() * k).unwrap();
        prop_assert_eq!(up.count(), m.count() * k * k);
        prop_assert_eq!(resize_mask(&up, m.height(), m.width()).unwrap(), m);
    }
}

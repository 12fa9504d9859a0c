//! Dataset handling, image I/O, resizing, metrics, run configuration and
//! the end-to-end stage chain used by the command-line tool.

pub mod config;
pub mod dataset;
pub mod io;
pub mod metrics;
pub mod resize;
pub mod run;
pub mod synth;

pub use config::{Preset, RunConfig};
pub use dataset::{DatasetEntry, DatasetIndex};
pub use metrics::{dice, evaluate_dataset, jaccard, ImageScore, MetricsReport};
pub use resize::{resize_mask, resize_probability, ResizeMode};
pub use run::{run_pipeline, segment, train, BatchSummary, Segmentation};
pub use synth::{generate_synthetic_dataset, noisy_probability, synthesize, Ellipse, SyntheticSample};

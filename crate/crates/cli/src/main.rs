use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use lesionseg::pipeline::dataset::DatasetIndex;
use lesionseg::pipeline::run::{eval_dirs, infer_dir, load_network, postprocess_dir, refine_dir, run_pipeline, train};
use lesionseg::pipeline::{generate_synthetic_dataset, RunConfig};

#[derive(Parser)]
#[command(name = "lesionseg", version, about = "Lesion segmentation: train, infer, refine, clean up and score")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images/ and masks/).
    Synth {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a network and write a checkpoint.
    Train {
        /// Dataset root holding images/ and masks/.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Per-iteration `iter<TAB>loss` log file.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write probability maps (8-bit grayscale) at each image's original size.
    Infer {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Refine probability maps with the fully connected CRF.
    Refine {
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Threshold and clean probability maps into masks.
    Postprocess {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted masks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Directory for report.csv.
        #[arg(long)]
        report_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Infer, refine, postprocess and restore size; optionally score.
    Pipeline {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    working_size: Option<usize>,
    #[arg(long)]
    se_radius: Option<usize>,
    #[arg(long)]
    crf_omega1: Option<f64>,
    #[arg(long)]
    crf_omega2: Option<f64>,
    #[arg(long)]
    crf_sigma_alpha: Option<f64>,
    #[arg(long)]
    crf_sigma_beta: Option<f64>,
    #[arg(long)]
    crf_sigma_gamma: Option<f64>,
    #[arg(long, alias = "crf-iters")]
    crf_iterations: Option<usize>,
    /// Window radius for CRF messages, or `none` for all pixel pairs.
    #[arg(long)]
    crf_window: Option<String>,
    #[arg(long)]
    skip_crf: bool,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => RunConfig::default(),
        };
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
            Ok(())
        };
        let s = |v: Option<f64>| v.map(|v| v.to_string());
        set("seed", self.seed.map(|v| v.to_string()))?;
        set("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()))?;
        set("working_size", self.working_size.map(|v| v.to_string()))?;
        set("se_radius", self.se_radius.map(|v| v.to_string()))?;
        set("crf_omega1", s(self.crf_omega1))?;
        set("crf_omega2", s(self.crf_omega2))?;
        set("crf_sigma_alpha", s(self.crf_sigma_alpha))?;
        set("crf_sigma_beta", s(self.crf_sigma_beta))?;
        set("crf_sigma_gamma", s(self.crf_sigma_gamma))?;
        set("crf_iterations", self.crf_iterations.map(|v| v.to_string()))?;
        set("crf_window", self.crf_window.clone())?;
        if self.skip_crf {
            set("skip_crf", Some("true".into()))?;
        }
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{kv}`"))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| anyhow!("missing --{name} (or `{name}_dir` in the config)"))
}

fn print_written(summary: &lesionseg::pipeline::BatchSummary, what: &str, dir: &Path) {
    println!("wrote {} {what} to {}", summary.written.len(), dir.display());
    if !summary.skipped.is_empty() {
        println!("skipped: {}", summary.skipped.join(", "));
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, size, out, common } => {
            let cfg = common.config()?;
            let index = generate_synthetic_dataset(n, size, cfg.seed, &out)?;
            println!("wrote {} samples to {}", index.len(), out.display());
        }
        Command::Train {
            data,
            iterations,
            learning_rate,
            log,
            common,
        } => {
            let mut cfg = common.config()?;
            if let Some(it) = iterations {
                cfg.sgd.iterations = it;
            }
            if let Some(lr) = learning_rate {
                cfg.sgd.learning_rate = lr;
            }
            let index = match (&data, &cfg.input_dir) {
                (Some(root), _) => DatasetIndex::scan_root(root)?,
                (None, Some(images)) => DatasetIndex::scan(images, cfg.truth_dir.as_deref())?,
                (None, None) => return Err(anyhow!("missing --data (or `input_dir` in the config)")),
            };
            if cfg.checkpoint.is_none() {
                cfg.checkpoint = Some(PathBuf::from("model.ckpt"));
            }
            let mut log_file = match &log {
                Some(path) => Some(BufWriter::new(
                    File::create(path).with_context(|| format!("creating {}", path.display()))?,
                )),
                None => None,
            };
            let state = train(&index, &cfg, log_file.as_mut().map(|w| w as &mut dyn Write))?;
            if let Some(mut w) = log_file {
                w.flush()?;
            }
            let last = state.loss_history.last().copied().unwrap_or(f64::NAN);
            let first = state.loss_history.first().copied().unwrap_or(f64::NAN);
            println!(
                "trained {} iterations: loss {first:.4} -> {last:.4}; checkpoint {}",
                state.iteration,
                cfg.checkpoint.as_ref().expect("set above").display()
            );
        }
        Command::Infer { input, output, common } => {
            let cfg = common.config()?;
            let input = required(input, &cfg.input_dir, "input")?;
            let output = required(output, &cfg.output_dir, "output")?;
            let params = load_network(&cfg)?;
            let summary = infer_dir(&params, &cfg, &input, &output)?;
            print_written(&summary, "probability maps", &output);
        }
        Command::Refine {
            images,
            probs,
            output,
            common,
        } => {
            let cfg = common.config()?;
            let images = required(images, &cfg.input_dir, "images")?;
            let output = required(output, &cfg.output_dir, "output")?;
            let summary = refine_dir(&cfg.crf, &images, &probs, &output)?;
            print_written(&summary, "refined maps", &output);
        }
        Command::Postprocess { probs, output, common } => {
            let cfg = common.config()?;
            let output = required(output, &cfg.output_dir, "output")?;
            let summary = postprocess_dir(cfg.se_radius, &probs, &output)?;
            print_written(&summary, "masks", &output);
        }
        Command::Eval {
            pred,
            truth,
            report_dir,
            common,
        } => {
            let cfg = common.config()?;
            let truth = required(truth, &cfg.truth_dir, "truth")?;
            let report = eval_dirs(&pred, &truth, report_dir.as_deref())?;
            print!("{}", report.to_table());
        }
        Command::Pipeline {
            input,
            output,
            truth,
            common,
        } => {
            let cfg = common.config()?;
            let input = required(input, &cfg.input_dir, "input")?;
            let output = required(output, &cfg.output_dir, "output")?;
            let truth = truth.or_else(|| cfg.truth_dir.clone());
            let params = load_network(&cfg)?;
            let summary = run_pipeline(&params, &cfg, &input, &output, truth.as_deref())?;
            print_written(&summary, "masks", &output);
            if let Some(report) = &summary.report {
                print!("{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

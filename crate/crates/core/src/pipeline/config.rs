//! Plain-text run configuration: `key = value` lines, `#` comment lines.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::crf::CrfParams;
use crate::error::{Error, Result};
use crate::network::{Aggregation, BackboneConfig};
use crate::trainer::SgdConfig;

pub const DEFAULT_WORKING_SIZE: usize = 224;
pub const DEFAULT_CRF_WINDOW: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Full,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Desk => "desk",
            Preset::Full => "full",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            _ => Err(Error::invalid(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub aggregation: Aggregation,
    /// Square side images are resampled to before the network.
    pub working_size: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub crf: CrfParams,
    /// Skip the CRF stage in `pipeline`.
    pub skip_crf: bool,
    pub se_radius: usize,
    pub input_dir: Option<PathBuf>,
    pub truth_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Desk,
            aggregation: Aggregation::Learned,
            working_size: DEFAULT_WORKING_SIZE,
            seed: 0,
            sgd: SgdConfig::desk(),
            crf: CrfParams {
                window: Some(DEFAULT_CRF_WINDOW),
                ..CrfParams::default()
            },
            skip_crf: false,
            se_radius: 1,
            input_dir: None,
            truth_dir: None,
            output_dir: None,
            checkpoint: None,
        }
    }
}

/// Every key accepted by [`RunConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "preset",
    "aggregation",
    "working_size",
    "seed",
    "learning_rate",
    "momentum",
    "weight_decay",
    "iterations",
    "decay_biases",
    "aux_loss",
    "crf_omega1",
    "crf_omega2",
    "crf_sigma_alpha",
    "crf_sigma_beta",
    "crf_sigma_gamma",
    "crf_iterations",
    "crf_window",
    "skip_crf",
    "se_radius",
    "input_dir",
    "truth_dir",
    "output_dir",
    "checkpoint",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("bad value `{value}` for `{key}`")))
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "preset" => self.preset = v.parse()?,
            "aggregation" => self.aggregation = v.parse()?,
            "working_size" => self.working_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "learning_rate" => self.sgd.learning_rate = parse(key, v)?,
            "momentum" => self.sgd.momentum = parse(key, v)?,
            "weight_decay" => self.sgd.weight_decay = parse(key, v)?,
            "iterations" => self.sgd.iterations = parse(key, v)?,
            "decay_biases" => self.sgd.decay_biases = parse(key, v)?,
            "aux_loss" => self.sgd.auxiliary_loss = parse(key, v)?,
            "crf_omega1" => self.crf.omega1 = parse(key, v)?,
            "crf_omega2" => self.crf.omega2 = parse(key, v)?,
            "crf_sigma_alpha" => self.crf.sigma_alpha = parse(key, v)?,
            "crf_sigma_beta" => self.crf.sigma_beta = parse(key, v)?,
            "crf_sigma_gamma" => self.crf.sigma_gamma = parse(key, v)?,
            "crf_iterations" => self.crf.iterations = parse(key, v)?,
            "crf_window" => {
                self.crf.window = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "skip_crf" => self.skip_crf = parse(key, v)?,
            "se_radius" => self.se_radius = parse(key, v)?,
            "input_dir" => self.input_dir = optional_path(v),
            "truth_dir" => self.truth_dir = optional_path(v),
            "output_dir" => self.output_dir = optional_path(v),
            "checkpoint" => self.checkpoint = optional_path(v),
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        Ok(match key {
            "preset" => self.preset.to_string(),
            "aggregation" => self.aggregation.to_string(),
            "working_size" => self.working_size.to_string(),
            "seed" => self.seed.to_string(),
            "learning_rate" => self.sgd.learning_rate.to_string(),
            "momentum" => self.sgd.momentum.to_string(),
            "weight_decay" => self.sgd.weight_decay.to_string(),
            "iterations" => self.sgd.iterations.to_string(),
            "decay_biases" => self.sgd.decay_biases.to_string(),
            "aux_loss" => self.sgd.auxiliary_loss.to_string(),
            "crf_omega1" => self.crf.omega1.to_string(),
            "crf_omega2" => self.crf.omega2.to_string(),
            "crf_sigma_alpha" => self.crf.sigma_alpha.to_string(),
            "crf_sigma_beta" => self.crf.sigma_beta.to_string(),
            "crf_sigma_gamma" => self.crf.sigma_gamma.to_string(),
            "crf_iterations" => self.crf.iterations.to_string(),
            "crf_window" => self.crf.window.map_or("none".into(), |w| w.to_string()),
            "skip_crf" => self.skip_crf.to_string(),
            "se_radius" => self.se_radius.to_string(),
            "input_dir" => path(&self.input_dir),
            "truth_dir" => path(&self.truth_dir),
            "output_dir" => path(&self.output_dir),
            "checkpoint" => path(&self.checkpoint),
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        })
    }

    /// Parses a config file body on top of the defaults. Repeated and
    /// unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| Error::Config { line: n + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        self.sgd.validate()?;
        self.crf.validate()?;
        if self.se_radius == 0 {
            return Err(Error::invalid("se_radius must be >= 1"));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneConfig {
        let base = match self.preset {
            Preset::Desk => BackboneConfig::desk(),
            Preset::Full => BackboneConfig::full(),
        };
        let mut cfg = base.with_input_size(self.working_size, self.working_size);
        cfg.aggregation = self.aggregation;
        cfg
    }

    /// Optimizer settings with the run seed applied.
    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            seed: self.seed,
            ..self.sgd.clone()
        }
    }
}

//! The attention-guided fusion network: a VGG-style backbone with five
//! pooling stages, three side branches tapped at conv3_1/conv4_1/conv5_1,
//! three dilated coupled-structure paths on pool5, per-path 1x1 fusion and
//! a final merge.

mod checkpoint;
mod graph;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{BackboneTaps, ForwardOutputs, ForwardVars, Graph, TapVars, INPUT_MEAN};

/// How the three fused maps are merged into the final logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Aggregation {
    /// 1x1 convolution over the channel-concatenated maps.
    Learned,
    /// Arithmetic mean of the three maps.
    Mean,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Learned => "learned",
            Aggregation::Mean => "mean",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Aggregation::Learned),
            "mean" => Ok(Aggregation::Mean),
            other => Err(Error::invalid(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; 5],
    pub convs_per_stage: [usize; 5],
    /// Default working (height, width).
    pub input_size: (usize, usize),
    pub desk_scale: bool,
    /// Width of the two 3x3 convs in each side branch.
    pub head_channels: usize,
    /// Dilation rates of the two CSM components, per path.
    pub path_dilations: [(usize, usize); 3],
    pub aggregation: Aggregation,
}

impl BackboneConfig {
    /// Reduced channel widths with the full topology.
    pub fn desk() -> Self {
        Self {
            stage_channels: [8, 16, 32, 32, 32],
            convs_per_stage: [2, 2, 2, 2, 2],
            input_size: (224, 224),
            desk_scale: true,
            head_channels: 16,
            path_dilations: [(1, 2), (2, 4), (4, 8)],
            aggregation: Aggregation::Learned,
        }
    }

    /// VGG16 conv widths and depths.
    pub fn full() -> Self {
        Self {
            stage_channels: [64, 128, 256, 512, 512],
            convs_per_stage: [2, 2, 3, 3, 3],
            input_size: (224, 224),
            desk_scale: false,
            head_channels: 128,
            path_dilations: [(1, 2), (2, 4), (4, 8)],
            aggregation: Aggregation::Learned,
        }
    }

    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_size = (height, width);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!(
                "input size {h}x{w} is not a positive multiple of 32"
            )));
        }
        if self.stage_channels.contains(&0) || self.convs_per_stage.contains(&0) || self.head_channels == 0 {
            return Err(Error::invalid("channel counts and stage depths must be positive"));
        }
        if self.path_dilations.iter().any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::invalid("dilation rates must be positive"));
        }
        Ok(())
    }

    /// Channels of the tap feeding side branch `index` (1-based): conv3_1, conv4_1, conv5_1.
    pub fn tap_channels(&self, index: usize) -> usize {
        self.stage_channels[index + 1]
    }

    pub fn pool5_channels(&self) -> usize {
        self.stage_channels[4]
    }

    /// `key=value` lines, one per field.
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        let dil = self
            .path_dilations
            .iter()
            .map(|(a, b)| format!("{a}:{b}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "stage_channels={}\nconvs_per_stage={}\ninput_size={}x{}\ndesk_scale={}\nhead_channels={}\npath_dilations={}\naggregation={}\n",
            list(&self.stage_channels),
            list(&self.convs_per_stage),
            self.input_size.0,
            self.input_size.1,
            self.desk_scale,
            self.head_channels,
            dil,
            self.aggregation
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut cfg = BackboneConfig::desk();
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed config line `{line}`")))?;
            let five = |v: &str| -> Result<[usize; 5]> {
                let parts: Vec<usize> = v
                    .split(',')
                    .map(|p| p.parse().map_err(|_| bad(format!("bad integer in `{v}`"))))
                    .collect::<Result<_>>()?;
                parts.try_into().map_err(|_| bad(format!("expected 5 values in `{v}`")))
            };
            match key {
                "stage_channels" => cfg.stage_channels = five(value)?,
                "convs_per_stage" => cfg.convs_per_stage = five(value)?,
                "input_size" => {
                    let (h, w) = value.split_once('x').ok_or_else(|| bad(format!("bad size `{value}`")))?;
                    cfg.input_size = (
                        h.parse().map_err(|_| bad(format!("bad size `{value}`")))?,
                        w.parse().map_err(|_| bad(format!("bad size `{value}`")))?,
                    );
                }
                "desk_scale" => cfg.desk_scale = value.parse().map_err(|_| bad(format!("bad bool `{value}`")))?,
                "head_channels" => {
                    cfg.head_channels = value.parse().map_err(|_| bad(format!("bad integer `{value}`")))?
                }
                "path_dilations" => {
                    let pairs: Vec<(usize, usize)> = value
                        .split(',')
                        .map(|p| {
                            let (a, b) = p.split_once(':').ok_or_else(|| bad(format!("bad dilation `{p}`")))?;
                            Ok((
                                a.parse().map_err(|_| bad(format!("bad dilation `{p}`")))?,
                                b.parse().map_err(|_| bad(format!("bad dilation `{p}`")))?,
                            ))
                        })
                        .collect::<Result<_>>()?;
                    cfg.path_dilations = pairs
                        .try_into()
                        .map_err(|_| bad(format!("expected 3 dilation pairs in `{value}`")))?;
                }
                "aggregation" => cfg.aggregation = value.parse()?,
                other => return Err(bad(format!("unknown config key `{other}`"))),
            }
            seen += 1;
        }
        if seen != 7 {
            return Err(bad(format!("config echo has {seen} fields, expected 7")));
        }
        Ok(cfg)
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// One convolution in the layer inventory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl LayerSpec {
    fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn kernel_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel, self.kernel)
    }

    pub fn bias_shape(&self) -> Shape {
        Shape::new(1, self.out_channels, 1, 1)
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel_shape().numel() + self.out_channels
    }
}

pub fn backbone_layer_name(stage: usize, conv: usize) -> String {
    format!("conv{stage}_{conv}")
}

/// Every convolution of the network, in construction order.
pub fn layer_inventory(config: &BackboneConfig) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    let mut in_ch = 3;
    for (s, (&ch, &n)) in config.stage_channels.iter().zip(&config.convs_per_stage).enumerate() {
        for k in 1..=n {
            layers.push(LayerSpec::new(backbone_layer_name(s + 1, k), in_ch, ch, 3));
            in_ch = ch;
        }
    }
    let h = config.head_channels;
    for i in 1..=3 {
        let tap = config.tap_channels(i);
        layers.push(LayerSpec::new(format!("branch{i}_conv1"), tap, h, 3));
        layers.push(LayerSpec::new(format!("branch{i}_conv2"), h, h, 3));
        layers.push(LayerSpec::new(format!("branch{i}_score"), h, 1, 1));
    }
    let c5 = config.pool5_channels();
    for i in 1..=3 {
        for part in ["a", "b"] {
            layers.push(LayerSpec::new(format!("csm{i}_{part}_dilated"), c5, c5, 3));
            layers.push(LayerSpec::new(format!("csm{i}_{part}_proj"), c5, c5, 1));
        }
        layers.push(LayerSpec::new(format!("path{i}_score"), c5, 1, 1));
    }
    for i in 1..=3 {
        layers.push(LayerSpec::new(format!("fuse{i}"), 2, 1, 1));
    }
    layers.push(LayerSpec::new("final", 3, 1, 1));
    layers
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Counts of the structural pieces, derived from the layer names.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub backbone_convs: usize,
    pub pooling_layers: usize,
    pub side_branches: usize,
    pub csm_blocks: usize,
    pub paths: usize,
    pub fusion_convs: usize,
    pub aggregation_layers: usize,
}

/// Network weights (the full parameter set Φ) plus the config that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    config: BackboneConfig,
    store: ParamStore,
}

impl NetworkParams {
    /// Kaiming-normal kernels (std = sqrt(2 / fan_in)) and zero biases from a
    /// ChaCha8 stream seeded with `seed`, in inventory order.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for layer in layer_inventory(&config) {
            let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            let shape = layer.kernel_shape();
            let data: Vec<f64> = (0..shape.numel()).map(|_| normal.sample(&mut rng)).collect();
            store.insert(weight_name(&layer.name), Tensor::new(shape, data)?);
            store.insert(bias_name(&layer.name), Tensor::zeros(layer.bias_shape()));
        }
        Ok(Self { config, store })
    }

    /// Same topology with every weight and bias zero.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        let mut params = Self::build(config, 0)?;
        for (_, t) in params.store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(params)
    }

    /// Wraps an existing store after checking it against the inventory.
    pub fn from_store(config: BackboneConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::zeros(config.clone())?;
        reference.store.check_congruent(&store)?;
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn set_aggregation(&mut self, aggregation: Aggregation) {
        self.config.aggregation = aggregation;
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn layer(&self, name: &str) -> Result<(&Tensor, &Tensor)> {
        Ok((self.store.get(&weight_name(name))?, self.store.get(&bias_name(name))?))
    }

    /// Replaces a layer's kernel and bias; shapes must match the inventory.
    pub fn set_layer(&mut self, name: &str, weight: Tensor, bias: Tensor) -> Result<()> {
        for (key, value) in [(weight_name(name), weight), (bias_name(name), bias)] {
            let slot = self.store.get_mut(&key)?;
            if slot.shape() != value.shape() {
                return Err(Error::invalid(format!(
                    "`{key}` has shape {}, got {}",
                    slot.shape(),
                    value.shape()
                )));
            }
            *slot = value;
        }
        Ok(())
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.store
            .names()
            .filter_map(|n| n.strip_suffix(".weight"))
            .map(str::to_owned)
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn topology(&self) -> Topology {
        let names = self.layer_names();
        let count = |pred: &dyn Fn(&str) -> bool| names.iter().filter(|n| pred(n)).count();
        let backbone_convs = count(&|n| n.starts_with("conv"));
        let stages = names
            .iter()
            .filter_map(|n| n.strip_prefix("conv").and_then(|r| r.split('_').next()))
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        Topology {
            backbone_convs,
            // one 2x2/2 pool closes every backbone stage
            pooling_layers: stages,
            side_branches: count(&|n| n.starts_with("branch") && n.ends_with("_score")),
            csm_blocks: count(&|n| n.starts_with("csm") && n.ends_with("_a_dilated")),
            paths: count(&|n| n.starts_with("path") && n.ends_with("_score")),
            fusion_convs: count(&|n| n.starts_with("fuse")),
            aggregation_layers: count(&|n| n == "final"),
        }
    }
}

//! Pixel-summed binary cross-entropy and SGD with momentum and weight decay.

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::maps::ProbabilityMap;
use crate::network::{BackboneConfig, Graph, NetworkParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking logs in the loss.
pub const LOSS_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Apply weight decay to biases as well as kernels.
    pub decay_biases: bool,
    /// Add per-path and per-branch cross-entropy terms to the loss.
    pub auxiliary_loss: bool,
}

impl SgdConfig {
    /// Optimizer settings used with pretrained initialization.
    pub fn paper() -> Self {
        Self {
            learning_rate: 1e-8,
            momentum: 0.9,
            weight_decay: 0.0005,
            iterations: 1000,
            seed: 0,
            decay_biases: true,
            auxiliary_loss: false,
        }
    }

    /// Settings for the reduced network trained from scratch on small images.
    pub fn desk() -> Self {
        Self {
            learning_rate: DESK_LEARNING_RATE,
            iterations: 500,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::invalid(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Desk default step size. The loss is a sum over pixels, so the step has to
/// shrink with the pixel count; this value suits 64x64 inputs.
pub const DESK_LEARNING_RATE: f64 = 5e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    /// (1, 3, h, w) RGB in [0, 1].
    pub image: Tensor,
    /// Row-major target values in [0, 1], one per pixel.
    pub truth: Vec<f64>,
}

impl TrainSample {
    pub fn new(image: Tensor, truth: Vec<f64>) -> Result<Self> {
        let s = image.shape();
        if s.batch != 1 || s.channels != 3 {
            return Err(Error::invalid(format!("expected a (1, 3, h, w) image, got {s}")));
        }
        if truth.len() != s.plane() {
            return Err(Error::ShapeMismatch {
                op: "train sample",
                dimension: "truth pixel count",
                expected: s.plane(),
                actual: truth.len(),
            });
        }
        if let Some(v) = truth.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("truth value {v} outside [0, 1]")));
        }
        Ok(Self { image, truth })
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s.height, s.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    pub velocity: ParamStore,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(params: NetworkParams) -> Self {
        let velocity = params.store().zeros_like();
        Self {
            params,
            velocity,
            iteration: 0,
            loss_history: Vec::new(),
        }
    }
}

/// −Σ_i [y_i ln p_i + (1 − y_i) ln(1 − p_i)] over all pixels, with p clamped
/// to [1e-12, 1 − 1e-12].
pub fn cross_entropy_loss(probability: &ProbabilityMap, truth: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(probability.to_tensor(), false);
    let loss = tape.binary_cross_entropy(p, truth, LOSS_EPS)?;
    Ok(tape.value(loss).data()[0])
}

/// Loss of one sample and its gradient with respect to every parameter.
pub fn loss_and_gradients(params: &NetworkParams, sample: &TrainSample, auxiliary: bool) -> Result<(f64, ParamStore)> {
    let mut tape = Tape::new();
    let (loss, param_vars) = {
        let mut graph = Graph::new(&mut tape, params, true)?;
        let x = graph.tape().leaf(sample.image.clone(), false);
        let out = graph.forward(x)?;
        let tape = graph.tape();
        let mut loss = tape.binary_cross_entropy(out.probability, &sample.truth, LOSS_EPS)?;
        if auxiliary {
            for logits in out.paths.into_iter().chain(out.branches) {
                let p = tape.sigmoid(logits);
                let aux = tape.binary_cross_entropy(p, &sample.truth, LOSS_EPS)?;
                loss = tape.add(loss, aux)?;
            }
        }
        (loss, graph.parameter_vars())
    };
    tape.backward(loss)?;
    let mut grads = ParamStore::new();
    for (name, var) in param_vars {
        grads.insert(name, tape.grad(var));
    }
    Ok((tape.value(loss).data()[0], grads))
}

/// Loss of one sample without building gradients.
pub fn sample_loss(params: &NetworkParams, sample: &TrainSample, auxiliary: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let mut graph = Graph::new(&mut tape, params, false)?;
    let x = graph.tape().leaf(sample.image.clone(), false);
    let out = graph.forward(x)?;
    let tape = graph.tape();
    let mut loss = tape.binary_cross_entropy(out.probability, &sample.truth, LOSS_EPS)?;
    if auxiliary {
        for logits in out.paths.into_iter().chain(out.branches) {
            let p = tape.sigmoid(logits);
            let aux = tape.binary_cross_entropy(p, &sample.truth, LOSS_EPS)?;
            loss = tape.add(loss, aux)?;
        }
    }
    Ok(tape.value(loss).data()[0])
}

/// One momentum step on every parameter:
/// g ← grad + λθ; v ← μv − ηg; θ ← θ + v.
pub fn sgd_step(state: &mut TrainState, grads: &ParamStore, config: &SgdConfig) -> Result<()> {
    config.validate()?;
    state.params.store().check_congruent(grads)?;
    let velocity = &mut state.velocity;
    for (name, theta) in state.params.store_mut().iter_mut() {
        let decay = if config.decay_biases || !name.ends_with(".bias") {
            config.weight_decay
        } else {
            0.0
        };
        let g = grads.get(name)?.data();
        let v = velocity.get_mut(name)?.data_mut();
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            let g = g + decay * *t;
            *v = config.momentum * *v - config.learning_rate * g;
            *t += *v;
        }
    }
    Ok(())
}

/// Builds a fresh network from `net_config` and `config.seed`, then trains it.
pub fn fit(samples: &[TrainSample], config: &SgdConfig, net_config: &BackboneConfig) -> Result<TrainState> {
    let params = NetworkParams::build(net_config.clone(), config.seed)?;
    let mut state = TrainState::new(params);
    fit_from(&mut state, samples, config, |_, _| {})?;
    Ok(state)
}

/// Continues training `state` for `config.iterations` steps, visiting the
/// samples cyclically with batch size 1. `on_step(iteration, loss)` sees
/// the pre-update loss of every step.
pub fn fit_from(
    state: &mut TrainState,
    samples: &[TrainSample],
    config: &SgdConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<()> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    for _ in 0..config.iterations {
        let sample = &samples[state.iteration % samples.len()];
        let (loss, grads) = loss_and_gradients(&state.params, sample, config.auxiliary_loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                iteration: state.iteration,
                loss,
            });
        }
        sgd_step(state, &grads, config)?;
        on_step(state.iteration, loss);
        state.loss_history.push(loss);
        state.iteration += 1;
    }
    Ok(())
}

/// Single-channel map helper for targets stored as tensors.
pub fn truth_from_tensor(t: &Tensor) -> Result<Vec<f64>> {
    let s = t.shape();
    if s.batch != 1 || s.channels != 1 {
        return Err(Error::invalid(format!("expected a (1, 1, h, w) target, got {s}")));
    }
    Ok(t.data().to_vec())
}

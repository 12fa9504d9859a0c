//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// A scalar function of a parameter store with an analytic gradient.
pub trait Objective {
    fn value(&mut self, params: &ParamStore) -> Result<f64>;

    /// Value and gradient (same names and shapes as `params`).
    fn gradient(&mut self, params: &ParamStore) -> Result<(f64, ParamStore)>;
}

/// Wraps a pair of closures as an [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: FnMut(&ParamStore) -> Result<f64>,
    G: FnMut(&ParamStore) -> Result<(f64, ParamStore)>,
{
    fn value(&mut self, params: &ParamStore) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&mut self, params: &ParamStore) -> Result<(f64, ParamStore)> {
        (self.gradient)(params)
    }
}

/// Which coordinates of each tensor get probed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Probe {
    /// Every coordinate.
    All,
    /// The `k` coordinates with the largest analytic |gradient| per tensor.
    Largest(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub probed: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tensors: Vec<TensorCheck>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the analytic gradient of `objective` against central
/// differences `(f(θ+ε) − f(θ−ε)) / 2ε` on the probed coordinates.
pub fn finite_difference_check(
    objective: &mut dyn Objective,
    params: &ParamStore,
    epsilon: f64,
    probe: Probe,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let first = objective.value(params)?;
    let second = objective.value(params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let (_, analytic) = objective.gradient(params)?;
    params.check_congruent(&analytic)?;

    let mut work = params.clone();
    let mut tensors = Vec::with_capacity(params.len());
    let mut overall: f64 = 0.0;
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let grad = analytic.get(&name)?.data().to_vec();
        let coords: Vec<usize> = match probe {
            Probe::All => (0..grad.len()).collect(),
            Probe::Largest(k) => {
                let mut idx: Vec<usize> = (0..grad.len()).collect();
                idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
                idx.truncate(k);
                idx
            }
        };
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let original = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = original + epsilon;
            let plus = objective.value(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original - epsilon;
            let minus = objective.value(&work)?;
            work.get_mut(&name)?.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        overall = overall.max(worst);
        tensors.push(TensorCheck {
            name,
            probed: coords.len(),
            max_relative_error: worst,
        });
    }
    Ok(GradCheckReport {
        max_relative_error: overall,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn one_weight(w: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::full(Shape::new(1, 1, 1, 1), w));
        p
    }

    fn quadratic() -> impl Objective {
        FnObjective {
            value: |p: &ParamStore| {
                let w = p.get("w")?.data()[0];
                Ok(3.0 * w * w - 2.0 * w + 1.0)
            },
            gradient: |p: &ParamStore| {
                let w = p.get("w")?.data()[0];
                let mut g = p.zeros_like();
                g.get_mut("w")?.data_mut()[0] = 6.0 * w - 2.0;
                Ok((3.0 * w * w - 2.0 * w + 1.0, g))
            },
        }
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let report = finite_difference_check(&mut quadratic(), &one_weight(0.7), 1e-5, Probe::All).unwrap();
        assert!(report.max_relative_error <= 1e-9, "{report:?}");
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let err = finite_difference_check(&mut quadratic(), &one_weight(0.7), 0.0, Probe::All).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut obj = FnObjective {
            value: |p: &ParamStore| Ok(p.get("w")?.data()[0].powi(2)),
            gradient: |p: &ParamStore| Ok((0.0, p.clone())),
        };
        let report = finite_difference_check(&mut obj, &one_weight(2.0), 1e-5, Probe::All).unwrap();
        assert!(report.max_relative_error > 0.4);
    }

    #[test]
    fn nondeterminism_is_reported() {
        let mut calls = 0.0;
        let mut obj = FnObjective {
            value: move |_: &ParamStore| {
                calls += 1.0;
                Ok(calls)
            },
            gradient: |p: &ParamStore| Ok((0.0, p.zeros_like())),
        };
        let err = finite_difference_check(&mut obj, &one_weight(1.0), 1e-5, Probe::All).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}

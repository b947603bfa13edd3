//! Central finite-difference verification of analytic gradients.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{backward, forward_window, HiddenState, ModelParameters, WindowLoss};
use crate::environment::State;
use crate::error::{Error, Result};

pub const GRAD_CHECK_EPS: f64 = 1e-4;
/// Magnitudes below this are compared absolutely rather than relatively.
const RELATIVE_FLOOR: f64 = 1e-6;
/// Resampling attempts per coordinate when a perturbation crosses a kink.
const KINK_RETRIES: usize = 20;

/// A piecewise-smooth scalar function with a claimed gradient.
pub trait Objective {
    fn dim(&self) -> usize;

    /// Loss value and a signature of the smooth piece it was evaluated on.
    fn loss(&self, theta: &[f64]) -> Result<(f64, u64)>;

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Named coordinate groups; sampling is spread evenly over them.
    fn strata(&self) -> Vec<(String, Range<usize>)> {
        vec![("theta".into(), 0..self.dim())]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name of the coordinate with the largest error.
    pub argmax: Option<String>,
    pub checked: usize,
    /// Coordinates skipped because `theta ± eps` left the smooth piece.
    pub kinked: usize,
}

/// Compares the analytic gradient against `(L(θ+εeᵢ) − L(θ−εeᵢ)) / 2ε` on
/// `samples` coordinates spread over the objective's strata. Coordinates
/// whose perturbation changes the piece signature are resampled.
pub fn grad_check(
    objective: &dyn Objective,
    theta: &[f64],
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if theta.len() != objective.dim() {
        return Err(Error::invalid("parameter length does not match objective"));
    }
    let analytic = objective.gradient(theta)?;
    let (_, base_sig) = objective.loss(theta)?;
    let strata: Vec<(String, Range<usize>)> = objective.strata().into_iter().filter(|s| !s.1.is_empty()).collect();
    if strata.is_empty() {
        return Err(Error::invalid("objective has no coordinates"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        argmax: None,
        checked: 0,
        kinked: 0,
    };
    for k in 0..samples {
        let (name, range) = &strata[k % strata.len()];
        for _ in 0..KINK_RETRIES {
            let i = rng.random_range(range.clone());
            probe[i] = theta[i] + eps;
            let (up, sig_up) = objective.loss(&probe)?;
            probe[i] = theta[i] - eps;
            let (down, sig_down) = objective.loss(&probe)?;
            probe[i] = theta[i];
            if sig_up != base_sig || sig_down != base_sig {
                report.kinked += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.argmax.is_none() {
                report.max_rel_error = err;
                report.argmax = Some(format!("{name}[{}]", i - range.start));
            }
            break;
        }
    }
    Ok(report)
}

/// The student's window loss as a function of its parameter vector.
pub struct WindowObjective<'a> {
    pub params: &'a ModelParameters,
    pub states: &'a [State],
    pub h0: &'a HiddenState,
    pub loss: &'a dyn WindowLoss,
}

impl WindowObjective<'_> {
    fn with(&self, theta: &[f64]) -> Result<ModelParameters> {
        ModelParameters::from_values(self.params.arch(), theta.to_vec())
    }
}

impl Objective for WindowObjective<'_> {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn loss(&self, theta: &[f64]) -> Result<(f64, u64)> {
        let p = self.with(theta)?;
        let (outs, tapes, _) = forward_window(&p, self.states, self.h0)?;
        let sig = tapes
            .iter()
            .map(|t| t.signature())
            .chain([self.loss.signature(&outs)])
            .fold(0u64, |acc, s| acc.rotate_left(7) ^ s);
        Ok((self.loss.evaluate(&outs).total(), sig))
    }

    fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let p = self.with(theta)?;
        let (outs, tapes, _) = forward_window(&p, self.states, self.h0)?;
        backward(&p, &tapes, &self.loss.evaluate(&outs).grads)
    }

    fn strata(&self) -> Vec<(String, Range<usize>)> {
        self.params
            .arch()
            .partitions()
            .iter()
            .map(|p| (p.name.clone(), p.range.clone()))
            .collect()
    }
}

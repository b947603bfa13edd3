//! Distillation and advantage actor-critic objectives over one window of
//! recorded steps.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Action;
use crate::student::{LossEval, OutputGrad, StudentOutput, WindowLoss, ACTION_DIM};

/// Added to the exploration scale so it never collapses to zero.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// One recorded interaction step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Policy mean at the step's state.
    pub mu: Action,
    /// Action sent to the environment (clamped).
    pub executed: Action,
    /// Pre-clamp Gaussian sample; equals `mu` for deterministic steps.
    pub sample: [f64; ACTION_DIM],
    pub sigma: [f64; ACTION_DIM],
    pub log_density: f64,
    pub reward: f64,
    pub value: f64,
    /// Action of the best teacher, expressed relative to the student's previous box.
    pub teacher_action: Action,
    pub teacher_reward: f64,
    pub mask: u8,
    pub gt_action: Action,
}

/// Steps of one window plus what follows it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpisodeRecord {
    pub steps: Vec<StepRecord>,
    /// Value of the state after the last step; ignored when `terminated`.
    pub bootstrap: f64,
    pub terminated: bool,
}

impl EpisodeRecord {
    pub fn sum_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn sum_teacher_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.teacher_reward).sum()
    }

    fn next_value(&self, i: usize) -> f64 {
        match self.steps.get(i + 1) {
            Some(s) => s.value,
            None if self.terminated => 0.0,
            None => self.bootstrap,
        }
    }
}

/// 1 when the student did strictly worse than the teacher.
pub fn mask(reward_student: f64, reward_teacher: f64) -> u8 {
    u8::from(reward_student < reward_teacher)
}

fn l1(a: &Action, b: &Action) -> f64 {
    a.to_array().iter().zip(b.to_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// `Σᵢ |a_teacher,i − μᵢ|₁ · mᵢ`
pub fn distill_loss(record: &EpisodeRecord) -> f64 {
    record
        .steps
        .iter()
        .map(|s| l1(&s.teacher_action, &s.mu) * f64::from(s.mask))
        .sum()
}

/// Log-density of `x` under independent normals `N(mu, sigma²)`.
pub fn log_density(x: &[f64; ACTION_DIM], mu: &[f64; ACTION_DIM], sigma: &[f64; ACTION_DIM]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    (0..ACTION_DIM)
        .map(|k| {
            let z = (x[k] - mu[k]) / sigma[k];
            -0.5 * z * z - sigma[k].ln() - half_ln_2pi
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledAction {
    /// Clamped into the action space.
    pub executed: Action,
    pub sample: [f64; ACTION_DIM],
    pub sigma: [f64; ACTION_DIM],
}

/// Exploration scale per component: distance to the ground-truth action plus a floor.
pub fn exploration_sigma(mu: &Action, gt_action: &Action) -> [f64; ACTION_DIM] {
    let (m, g) = (mu.to_array(), gt_action.to_array());
    std::array::from_fn(|k| (m[k] - g[k]).abs() + SIGMA_FLOOR)
}

/// Draws a Gaussian action around `mu`; returns it with its (pre-clamp) log-density.
pub fn sample_action(mu: &Action, gt_action: &Action, rng: &mut impl Rng) -> (SampledAction, f64) {
    let sigma = exploration_sigma(mu, gt_action);
    let m = mu.to_array();
    let sample: [f64; ACTION_DIM] = std::array::from_fn(|k| {
        let z: f64 = StandardNormal.sample(rng);
        m[k] + sigma[k] * z
    });
    let ld = log_density(&sample, &m, &sigma);
    let executed = Action::from_array(sample).clamped();
    (
        SampledAction {
            executed,
            sample,
            sigma,
        },
        ld,
    )
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReturnsMode {
    /// Discounted sum of the remaining rewards plus the bootstrap value.
    #[default]
    #[serde(rename = "forward")]
    Forward,
    /// Discounted sum of rewards up to and including step `i`.
    #[serde(rename = "prefix")]
    Prefix,
}

impl FromStr for ReturnsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "prefix" => Ok(Self::Prefix),
            other => Err(Error::Config(format!("unknown returns mode `{other}`"))),
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("discount {gamma} outside (0, 1]")))
    }
}

/// Value-regression targets `R_i`.
pub fn returns(record: &EpisodeRecord, gamma: f64, mode: ReturnsMode) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let n = record.steps.len();
    let mut out = vec![0.0; n];
    match mode {
        ReturnsMode::Forward => {
            let mut acc = if record.terminated { 0.0 } else { record.bootstrap };
            for i in (0..n).rev() {
                acc = record.steps[i].reward + gamma * acc;
                out[i] = acc;
            }
        }
        ReturnsMode::Prefix => {
            let (mut acc, mut disc) = (0.0, 1.0);
            for (i, s) in record.steps.iter().enumerate() {
                acc += disc * s.reward;
                disc *= gamma;
                out[i] = acc;
            }
        }
    }
    Ok(out)
}

/// One-step advantages `r_i + γ v_{i+1} − v_i` from the recorded values.
pub fn advantages(record: &EpisodeRecord, gamma: f64) -> Vec<f64> {
    (0..record.steps.len())
        .map(|i| {
            let s = &record.steps[i];
            s.reward + gamma * record.next_value(i) - s.value
        })
        .collect()
}

/// `(loss_pi, loss_v)` evaluated on the recorded densities and values.
pub fn actor_critic_loss(record: &EpisodeRecord, gamma: f64, mode: ReturnsMode) -> Result<(f64, f64)> {
    let adv = advantages(record, gamma);
    let ret = returns(record, gamma, mode)?;
    let loss_pi = -record
        .steps
        .iter()
        .zip(&adv)
        .map(|(s, a)| s.log_density * a)
        .sum::<f64>();
    let loss_v = record
        .steps
        .iter()
        .zip(&ret)
        .map(|(s, r)| 0.5 * (r - s.value).powi(2))
        .sum();
    Ok((loss_pi, loss_v))
}

/// The distillation objective as a function of the student's outputs.
#[derive(Clone, Debug)]
pub struct DistillLoss {
    pub teacher_actions: Vec<Action>,
    pub masks: Vec<u8>,
}

impl DistillLoss {
    pub fn from_record(record: &EpisodeRecord) -> Self {
        Self {
            teacher_actions: record.steps.iter().map(|s| s.teacher_action).collect(),
            masks: record.steps.iter().map(|s| s.mask).collect(),
        }
    }
}

impl WindowLoss for DistillLoss {
    fn evaluate(&self, outputs: &[StudentOutput]) -> LossEval {
        let mut eval = LossEval::default();
        for ((o, a), &m) in outputs.iter().zip(&self.teacher_actions).zip(&self.masks) {
            let m = f64::from(m);
            let (mu, t) = (o.action.to_array(), a.to_array());
            eval.per_step.push(l1(a, &o.action) * m);
            eval.grads.push(OutputGrad {
                action: std::array::from_fn(|k| {
                    let d = t[k] - mu[k];
                    if d > 0.0 {
                        -m
                    } else if d < 0.0 {
                        m
                    } else {
                        0.0
                    }
                }),
                value: 0.0,
            });
        }
        eval
    }

    fn signature(&self, outputs: &[StudentOutput]) -> u64 {
        let mut sig = 0u64;
        for (o, a) in outputs.iter().zip(&self.teacher_actions) {
            for (t, m) in a.to_array().iter().zip(o.action.to_array()) {
                sig = sig.rotate_left(1) ^ u64::from(t > &m);
            }
        }
        sig
    }
}

/// Actor-critic objective with frozen advantages and returns: the samples,
/// scales, advantages and targets are constants, so gradients reach the
/// policy mean through the log-density and the value through the regression.
#[derive(Clone, Debug)]
pub struct ActorCriticLoss {
    pub samples: Vec<[f64; ACTION_DIM]>,
    pub sigmas: Vec<[f64; ACTION_DIM]>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl ActorCriticLoss {
    pub fn from_record(record: &EpisodeRecord, gamma: f64, mode: ReturnsMode) -> Result<Self> {
        Ok(Self {
            samples: record.steps.iter().map(|s| s.sample).collect(),
            sigmas: record.steps.iter().map(|s| s.sigma).collect(),
            advantages: advantages(record, gamma),
            returns: returns(record, gamma, mode)?,
        })
    }

    /// Policy and value parts of the loss, in that order.
    pub fn parts(&self, outputs: &[StudentOutput]) -> (f64, f64) {
        let mut pi = 0.0;
        let mut v = 0.0;
        for (i, o) in outputs.iter().enumerate() {
            pi -= log_density(&self.samples[i], &o.action.to_array(), &self.sigmas[i]) * self.advantages[i];
            v += 0.5 * (self.returns[i] - o.value).powi(2);
        }
        (pi, v)
    }
}

impl WindowLoss for ActorCriticLoss {
    fn evaluate(&self, outputs: &[StudentOutput]) -> LossEval {
        let mut eval = LossEval::default();
        for (i, o) in outputs.iter().enumerate() {
            let mu = o.action.to_array();
            let (x, s, a) = (&self.samples[i], &self.sigmas[i], self.advantages[i]);
            let pi = -log_density(x, &mu, s) * a;
            let v = 0.5 * (self.returns[i] - o.value).powi(2);
            eval.per_step.push(pi + v);
            eval.grads.push(OutputGrad {
                action: std::array::from_fn(|k| -a * (x[k] - mu[k]) / (s[k] * s[k])),
                value: o.value - self.returns[i],
            });
        }
        eval
    }
}

/// The policy term of an [`ActorCriticLoss`] on its own.
pub struct PolicyPart<'a>(pub &'a ActorCriticLoss);

/// The value term of an [`ActorCriticLoss`] on its own.
pub struct ValuePart<'a>(pub &'a ActorCriticLoss);

impl WindowLoss for PolicyPart<'_> {
    fn evaluate(&self, outputs: &[StudentOutput]) -> LossEval {
        let l = self.0;
        let mut eval = LossEval::default();
        for (i, o) in outputs.iter().enumerate() {
            let mu = o.action.to_array();
            let (x, s, a) = (&l.samples[i], &l.sigmas[i], l.advantages[i]);
            eval.per_step.push(-log_density(x, &mu, s) * a);
            eval.grads.push(OutputGrad {
                action: std::array::from_fn(|k| -a * (x[k] - mu[k]) / (s[k] * s[k])),
                value: 0.0,
            });
        }
        eval
    }
}

impl WindowLoss for ValuePart<'_> {
    fn evaluate(&self, outputs: &[StudentOutput]) -> LossEval {
        let r = &self.0.returns;
        LossEval {
            per_step: outputs.iter().zip(r).map(|(o, r)| 0.5 * (r - o.value).powi(2)).collect(),
            grads: outputs
                .iter()
                .zip(r)
                .map(|(o, r)| OutputGrad {
                    action: [0.0; ACTION_DIM],
                    value: o.value - r,
                })
                .collect(),
        }
    }
}

/// Weighted sum of window losses.
pub struct Combined<'a>(pub Vec<(f64, &'a dyn WindowLoss)>);

impl WindowLoss for Combined<'_> {
    fn evaluate(&self, outputs: &[StudentOutput]) -> LossEval {
        let mut eval = LossEval {
            per_step: vec![0.0; outputs.len()],
            grads: vec![OutputGrad::default(); outputs.len()],
        };
        for (w, loss) in &self.0 {
            let part = loss.evaluate(outputs);
            for i in 0..outputs.len() {
                eval.per_step[i] += w * part.per_step[i];
                eval.grads[i].value += w * part.grads[i].value;
                for k in 0..ACTION_DIM {
                    eval.grads[i].action[k] += w * part.grads[i].action[k];
                }
            }
        }
        eval
    }

    fn signature(&self, outputs: &[StudentOutput]) -> u64 {
        self.0.iter().fold(0, |acc, (_, l)| acc.rotate_left(13) ^ l.signature(outputs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn step(reward: f64, value: f64) -> StepRecord {
        StepRecord {
            mu: Action::ZERO,
            executed: Action::ZERO,
            sample: [0.0; 4],
            sigma: [1.0; 4],
            log_density: 0.0,
            reward,
            value,
            teacher_action: Action::ZERO,
            teacher_reward: 0.0,
            mask: 0,
            gt_action: Action::ZERO,
        }
    }

    #[test]
    fn mask_examples() {
        assert_eq!(mask(0.2, 0.6), 1);
        assert_eq!(mask(0.6, 0.2), 0);
        assert_eq!(mask(0.4, 0.4), 0);
    }

    #[test]
    fn distill_examples() {
        let mut s = step(0.0, 0.0);
        s.teacher_action = Action::new(0.1, -0.1, 0.2, 0.0);
        s.mask = 1;
        let one = EpisodeRecord {
            steps: vec![s.clone()],
            ..Default::default()
        };
        assert!((distill_loss(&one) - 0.4).abs() < 1e-12);
        let two = EpisodeRecord {
            steps: vec![s.clone(), s.clone()],
            ..Default::default()
        };
        assert!((distill_loss(&two) - 0.8).abs() < 1e-12);
        let mut unmasked = two.clone();
        unmasked.steps.iter_mut().for_each(|s| s.mask = 0);
        assert_eq!(distill_loss(&unmasked), 0.0);
    }

    #[test]
    fn log_density_closed_form() {
        let ld = log_density(&[0.0; 4], &[0.0; 4], &[1.0; 4]);
        assert!((ld + 2.0 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
        assert!((ld + 3.6757).abs() < 1e-4);
    }

    #[test]
    fn sampling_examples() {
        let mu = Action::new(0.2, -0.3, 0.0, 0.5);
        let (s, _) = sample_action(&mu, &mu, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(s.sigma, [SIGMA_FLOOR; 4]);
        let a = sample_action(&mu, &Action::ZERO, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_action(&mu, &Action::ZERO, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn clamped_sample_keeps_raw_density() {
        let mu = Action::new(0.99, 0.0, 0.0, 0.0);
        let gt = Action::new(-1.0, 0.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (s, ld) = sample_action(&mu, &gt, &mut rng);
            assert!(s.executed.in_range());
            assert_eq!(ld, log_density(&s.sample, &mu.to_array(), &s.sigma));
        }
    }

    #[test]
    fn returns_examples() {
        let rec = EpisodeRecord {
            steps: vec![step(0.4, 0.0), step(0.6, 0.0)],
            bootstrap: 123.0,
            terminated: true,
        };
        let f = returns(&rec, 1.0, ReturnsMode::Forward).unwrap();
        assert!((f[0] - 1.0).abs() < 1e-12 && (f[1] - 0.6).abs() < 1e-12);
        let p = returns(&rec, 1.0, ReturnsMode::Prefix).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
        let mut open = rec.clone();
        open.terminated = false;
        open.bootstrap = 0.5;
        let g = returns(&open, 0.5, ReturnsMode::Forward).unwrap();
        // 0.6 + 0.5 * 0.5 = 0.85; 0.4 + 0.5 * 0.85 = 0.825
        assert!((g[1] - 0.85).abs() < 1e-12 && (g[0] - 0.825).abs() < 1e-12);
        assert!(returns(&rec, 0.0, ReturnsMode::Forward).is_err());
        assert!("sideways".parse::<ReturnsMode>().is_err());
        assert_eq!("prefix".parse::<ReturnsMode>().unwrap(), ReturnsMode::Prefix);
    }

    #[test]
    fn actor_critic_examples() {
        let mut s = step(0.4, 0.1);
        s.log_density = -1.2;
        let open = EpisodeRecord {
            steps: vec![s.clone()],
            bootstrap: 0.2,
            terminated: false,
        };
        assert!((advantages(&open, 1.0)[0] - 0.5).abs() < 1e-12);
        let (pi, _) = actor_critic_loss(&open, 1.0, ReturnsMode::Forward).unwrap();
        assert!((pi - 0.6).abs() < 1e-12);
        let done = EpisodeRecord {
            steps: vec![s],
            bootstrap: 0.0,
            terminated: true,
        };
        let (_, v) = actor_critic_loss(&done, 1.0, ReturnsMode::Forward).unwrap();
        assert!((v - 0.045).abs() < 1e-12);
        let mut flat = done.clone();
        flat.steps[0].reward = 0.1;
        assert_eq!(actor_critic_loss(&flat, 1.0, ReturnsMode::Forward).unwrap().0, 0.0);
    }

    #[test]
    fn window_losses_agree_with_record_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut rec = EpisodeRecord {
            bootstrap: 0.3,
            ..Default::default()
        };
        let mut outs = Vec::new();
        for i in 0..4 {
            let mu = Action::new(0.1 * i as f64, -0.2, 0.05, 0.0);
            let (s, ld) = sample_action(&mu, &Action::ZERO, &mut rng);
            let mut r = step(0.1 * i as f64, 0.2);
            r.mu = mu;
            r.sample = s.sample;
            r.sigma = s.sigma;
            r.log_density = ld;
            r.teacher_action = Action::new(0.3, 0.1, -0.1, 0.2);
            r.mask = (i % 2) as u8;
            outs.push(StudentOutput { action: mu, value: 0.2 });
            rec.steps.push(r);
        }
        let d = DistillLoss::from_record(&rec).evaluate(&outs).total();
        assert!((d - distill_loss(&rec)).abs() < 1e-12);
        let ac = ActorCriticLoss::from_record(&rec, 1.0, ReturnsMode::Forward).unwrap();
        let (pi, v) = actor_critic_loss(&rec, 1.0, ReturnsMode::Forward).unwrap();
        assert!((ac.evaluate(&outs).total() - (pi + v)).abs() < 1e-12);
    }

    #[test]
    fn masked_steps_have_zero_distill_gradient() {
        let loss = DistillLoss {
            teacher_actions: vec![Action::new(0.5, 0.5, 0.5, 0.5); 2],
            masks: vec![0, 1],
        };
        let outs = vec![StudentOutput { action: Action::ZERO, value: 0.0 }; 2];
        let eval = loss.evaluate(&outs);
        assert_eq!(eval.grads[0].action, [0.0; 4]);
        assert_eq!(eval.grads[1].action, [-1.0; 4]);
    }

    proptest! {
        #[test]
        fn perturbing_masked_steps_leaves_loss_unchanged(
            mu in prop::collection::vec(-1.0..1.0f64, 4),
            shift in -0.5..0.5f64,
        ) {
            let loss = DistillLoss {
                teacher_actions: vec![Action::new(0.1, 0.2, 0.3, 0.4); 2],
                masks: vec![1, 0],
            };
            let a = Action::new(mu[0], mu[1], mu[2], mu[3]);
            let b = Action::new(mu[0] + shift, mu[1], mu[2] - shift, mu[3]);
            let base = vec![StudentOutput { action: a, value: 0.0 }; 2];
            let moved = vec![base[0], StudentOutput { action: b, value: 0.0 }];
            prop_assert_eq!(loss.evaluate(&base).total(), loss.evaluate(&moved).total());
        }
    }
}

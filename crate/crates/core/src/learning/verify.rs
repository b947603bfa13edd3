//! Finite-difference verification of the student's gradients under each training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::{ActorCriticLoss, Combined, DistillLoss, PolicyPart, ValuePart};
use crate::environment::{generate_synthetic_video, make_state, CropConfig, State, SyntheticSpec};
use crate::error::Result;
use crate::geometry::{Action, BoundingBox};
use crate::student::{
    forward_window, grad_check, Architecture, GradCheckReport, HiddenState, ModelConfig, ModelParameters,
    StudentOutput, WindowLoss, WindowObjective, ACTION_DIM, GRAD_CHECK_EPS,
};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;
const WINDOW: usize = 5;

#[derive(Clone, Debug)]
pub struct LossCheck {
    pub loss: &'static str,
    pub report: GradCheckReport,
}

impl LossCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_CHECK_TOLERANCE
    }
}

fn window_states(patch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<State>> {
    let spec = SyntheticSpec {
        width: 64,
        height: 64,
        length: WINDOW + 1,
        ..SyntheticSpec::default()
    };
    let video = generate_synthetic_video(&spec, rng.random(), "gradcheck")?;
    let crop = CropConfig {
        patch_size: (patch, patch),
        ..CropConfig::default()
    };
    (1..=WINDOW)
        .map(|t| {
            let g = video.ground_truth()[t - 1];
            let b = BoundingBox::new(
                g.x + rng.random_range(-3.0..3.0),
                g.y + rng.random_range(-3.0..3.0),
                g.w * rng.random_range(0.85..1.15),
                g.h * rng.random_range(0.85..1.15),
            );
            make_state(video.frame(t - 1), video.frame(t), &b, &crop)
        })
        .collect()
}

fn perturbed(outs: &[StudentOutput], rng: &mut ChaCha8Rng, scale: f64) -> Vec<[f64; ACTION_DIM]> {
    outs.iter()
        .map(|o| {
            let mu = o.action.to_array();
            std::array::from_fn(|k| mu[k] + rng.random_range(-scale..scale))
        })
        .collect()
}

/// Checks the distillation, policy, value and combined losses on a random
/// 5-step window of a freshly initialized student built from `config`.
pub fn check_student_gradients(config: &ModelConfig, seed: u64, samples: usize) -> Result<Vec<LossCheck>> {
    let arch = Architecture::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParameters::init(&arch, rng.random());
    let states = window_states(config.patch_size, &mut rng)?;
    let n = arch.hidden_size();
    let h0 = HiddenState {
        h: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
        c: (0..n).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let (outs, _, _) = forward_window(&params, &states, &h0)?;

    let distill = DistillLoss {
        teacher_actions: perturbed(&outs, &mut rng, 0.05).into_iter().map(Action::from_array).collect(),
        masks: (0..WINDOW).map(|_| u8::from(rng.random_bool(0.7))).collect(),
    };
    let ac = ActorCriticLoss {
        samples: perturbed(&outs, &mut rng, 0.05),
        sigmas: (0..WINDOW).map(|_| std::array::from_fn(|_| rng.random_range(0.02..0.1))).collect(),
        advantages: (0..WINDOW).map(|_| rng.random_range(-1.0..1.0)).collect(),
        returns: (0..WINDOW).map(|_| rng.random_range(-2.0..1.0)).collect(),
    };
    let policy = PolicyPart(&ac);
    let value = ValuePart(&ac);
    let combined = Combined(vec![(1.0, &distill), (1e-3, &ac)]);
    let losses: [(&'static str, &dyn WindowLoss); 4] =
        [("distill", &distill), ("policy", &policy), ("value", &value), ("combined", &combined)];

    losses
        .iter()
        .enumerate()
        .map(|(i, (name, loss))| {
            let obj = WindowObjective {
                params: &params,
                states: &states,
                h0: &h0,
                loss: *loss,
            };
            let report = grad_check(&obj, params.values(), GRAD_CHECK_EPS, samples, seed ^ i as u64)?;
            log::info!("{name}: max relative error {:.3e} over {} coordinates", report.max_rel_error, report.checked);
            Ok(LossCheck { loss: name, report })
        })
        .collect()
}

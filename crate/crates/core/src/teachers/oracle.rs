//! Ground-truth teacher with calibrated per-frame noise.
//!
//! Each prediction is an independent perturbation of the true box: the
//! center shifts by `N(0, s)` box widths/heights and each side is scaled by
//! `exp(N(0, s))`. Because the perturbation is relative, the IoU
//! distribution does not depend on box size, so `s` can be calibrated once
//! on a reference box to hit a requested mean IoU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{stable_hash, FrameInput, SessionCursor, Teacher, TeacherSession};
use crate::environment::Video;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BoundingBox};

const CALIBRATION_SAMPLES: usize = 20_000;
const CALIBRATION_SEED: u64 = 0x0ca1_1b7a_7e00;
const MAX_NOISE: f64 = 4.0;

/// Relative noise scale `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel(pub f64);

fn perturb(g: &BoundingBox, s: f64, z: [f64; 4]) -> BoundingBox {
    let w = g.w * (s * z[2]).exp();
    let h = g.h * (s * z[3]).exp();
    let (cx, cy) = g.center();
    BoundingBox::from_center(cx + s * z[0] * g.w, cy + s * z[1] * g.h, w, h)
}

fn normal4(rng: &mut ChaCha8Rng) -> [f64; 4] {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

fn mean_iou(s: f64, draws: &[[f64; 4]]) -> f64 {
    let reference = BoundingBox::new(0.0, 0.0, 1.0, 1.0);
    draws
        .iter()
        .map(|z| iou_unchecked(&perturb(&reference, s, *z), &reference))
        .sum::<f64>()
        / draws.len() as f64
}

/// Noise scale whose expected IoU against the truth is `target`.
pub fn calibrate(target: f64) -> Result<NoiseLevel> {
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::invalid(format!("target IoU {target} outside (0, 1]")));
    }
    if target == 1.0 {
        return Ok(NoiseLevel(0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
    let draws: Vec<[f64; 4]> = (0..CALIBRATION_SAMPLES).map(|_| normal4(&mut rng)).collect();
    if mean_iou(MAX_NOISE, &draws) > target {
        return Err(Error::invalid(format!("target IoU {target} unreachable")));
    }
    let (mut lo, mut hi) = (0.0, MAX_NOISE);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mean_iou(mid, &draws) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(NoiseLevel(0.5 * (lo + hi)))
}

#[derive(Clone, Debug)]
pub struct OracleNoiseTeacher {
    id: String,
    noise: NoiseLevel,
    seed: u64,
}

impl OracleNoiseTeacher {
    pub fn new(id: impl Into<String>, noise: NoiseLevel, seed: u64) -> Self {
        Self {
            id: id.into(),
            noise,
            seed,
        }
    }

    /// Teacher whose mean IoU against the truth is about `target_iou`.
    pub fn calibrated(id: impl Into<String>, target_iou: f64, seed: u64) -> Result<Self> {
        Ok(Self::new(id, calibrate(target_iou)?, seed))
    }

    pub fn noise(&self) -> NoiseLevel {
        self.noise
    }
}

impl Teacher for OracleNoiseTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn session(&self, video: &Video) -> Result<Box<dyn TeacherSession>> {
        let seed = self.seed ^ stable_hash(video.id()) ^ stable_hash(&self.id).rotate_left(17);
        Ok(Box::new(OracleSession {
            id: self.id.clone(),
            truth: video.ground_truth().to_vec(),
            noise: self.noise.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: SessionCursor::default(),
        }))
    }
}

struct OracleSession {
    id: String,
    truth: Vec<BoundingBox>,
    noise: f64,
    rng: ChaCha8Rng,
    cursor: SessionCursor,
}

impl TeacherSession for OracleSession {
    fn id(&self) -> &str {
        &self.id
    }

    fn init(&mut self, input: FrameInput<'_>, g0: BoundingBox) -> Result<()> {
        self.cursor.init(&self.id, &input, g0)
    }

    fn predict(&mut self, input: FrameInput<'_>) -> Result<BoundingBox> {
        self.cursor.check_predict(&self.id, &input)?;
        let g = self.truth.get(input.index).ok_or_else(|| Error::Teacher {
            teacher: self.id.clone(),
            message: format!("no ground truth for frame {}", input.index),
        })?;
        let b = if self.noise == 0.0 {
            *g
        } else {
            perturb(g, self.noise, normal4(&mut self.rng))
        };
        self.cursor.advance(b);
        Ok(b)
    }

    fn current(&self) -> Option<BoundingBox> {
        self.cursor.current()
    }
}

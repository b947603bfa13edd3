//! Procedural single-target videos with exact ground truth.
//!
//! A textured rectangle moves over a static textured background. The box is
//! always kept fully inside the frame: positions reflect off the borders and
//! scale changes that would not fit are skipped.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::video::Video;
use crate::error::{Error, Result};
use crate::frame::{Frame, MIN_FRAME_SIDE};
use crate::geometry::BoundingBox;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionModel {
    /// Constant velocity of `speed` px/frame in a random direction.
    Linear,
    /// Velocity perturbed by up to `accel` per frame, norm capped at `max_step`.
    RandomWalk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Smooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub motion: MotionModel,
    pub speed: f64,
    pub max_step: f64,
    pub accel: f64,
    /// Standard deviation of the per-frame log scale change.
    pub scale_drift: f64,
    pub texture: Texture,
    /// Half-width of the uniform per-pixel sensor noise, in intensity levels.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 96,
            length: 48,
            min_size: 14.0,
            max_size: 30.0,
            motion: MotionModel::RandomWalk,
            speed: 1.5,
            max_step: 2.0,
            accel: 0.5,
            scale_drift: 0.01,
            texture: Texture::Smooth,
            noise: 4.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.width < MIN_FRAME_SIDE || self.height < MIN_FRAME_SIDE {
            return bad(format!("frame {}x{} too small", self.width, self.height));
        }
        if self.length < 2 {
            return bad("length must be at least 2".into());
        }
        if !(self.min_size >= 1.0 && self.min_size <= self.max_size) {
            return bad(format!(
                "object size range [{}, {}] invalid",
                self.min_size, self.max_size
            ));
        }
        if self.max_size > self.width.min(self.height) as f64 {
            return bad(format!(
                "object size {} exceeds frame {}x{}",
                self.max_size, self.width, self.height
            ));
        }
        for (name, v) in [
            ("speed", self.speed),
            ("max_step", self.max_step),
            ("accel", self.accel),
            ("scale_drift", self.scale_drift),
            ("noise", self.noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a non-negative number"));
            }
        }
        Ok(())
    }
}

/// Sum of a few random plane waves per channel around a base color.
struct SmoothField {
    base: [f64; 3],
    waves: Vec<[f64; 4]>,
}

impl SmoothField {
    fn random(rng: &mut ChaCha8Rng, base: [f64; 3], amplitude: f64, scale: f64) -> Self {
        let waves = (0..3 * 3)
            .map(|_| {
                let angle = rng.random_range(0.0..2.0 * PI);
                let freq = rng.random_range(0.5..2.0) * 2.0 * PI / scale;
                [
                    freq * angle.cos(),
                    freq * angle.sin(),
                    rng.random_range(0.0..2.0 * PI),
                    amplitude * rng.random_range(0.3..1.0),
                ]
            })
            .collect();
        Self { base, waves }
    }

    fn at(&self, x: f64, y: f64, c: usize) -> f64 {
        let mut v = self.base[c];
        for w in &self.waves[c * 3..c * 3 + 3] {
            v += w[3] * (w[0] * x + w[1] * y + w[2]).sin();
        }
        v
    }
}

struct Appearance {
    background: SmoothField,
    flat_background: bool,
    fg: [[f64; 3]; 2],
    checks: f64,
}

impl Appearance {
    fn random(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let scale = spec.width.max(spec.height) as f64 / 2.0;
        let base = [
            rng.random_range(60.0..120.0),
            rng.random_range(60.0..120.0),
            rng.random_range(60.0..120.0),
        ];
        let background = SmoothField::random(rng, base, 25.0, scale);
        // Foreground colors sit well away from the background's intensity band.
        let bright = [
            rng.random_range(190.0..250.0),
            rng.random_range(150.0..250.0),
            rng.random_range(150.0..250.0),
        ];
        let dark = [
            rng.random_range(0.0..30.0),
            rng.random_range(0.0..30.0),
            rng.random_range(0.0..30.0),
        ];
        Self {
            background,
            flat_background: spec.texture == Texture::Flat,
            fg: [bright, dark],
            checks: rng.random_range(2.0..4.0f64).floor(),
        }
    }

    fn background(&self, x: f64, y: f64, c: usize) -> f64 {
        if self.flat_background {
            self.background.base[c]
        } else {
            self.background.at(x, y, c)
        }
    }

    /// Checkerboard in box-normalized coordinates, so it moves and scales with the box.
    fn foreground(&self, u: f64, v: f64, c: usize) -> f64 {
        let iu = (u.clamp(0.0, 0.999) * self.checks).floor() as i64;
        let iv = (v.clamp(0.0, 0.999) * self.checks).floor() as i64;
        self.fg[((iu + iv) & 1) as usize][c]
    }
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn render(
    spec: &SyntheticSpec,
    look: &Appearance,
    b: &BoundingBox,
    rng: &mut ChaCha8Rng,
) -> Result<Frame> {
    let mut data = Vec::with_capacity(spec.width * spec.height * 3);
    for py in 0..spec.height {
        let (y0, y1) = (py as f64, py as f64 + 1.0);
        let cov_y = overlap_1d(y0, y1, b.y, b.bottom());
        for px in 0..spec.width {
            let (x0, x1) = (px as f64, px as f64 + 1.0);
            let coverage = overlap_1d(x0, x1, b.x, b.right()) * cov_y;
            let (cx, cy) = (x0 + 0.5, y0 + 0.5);
            let (u, v) = ((cx - b.x) / b.w, (cy - b.y) / b.h);
            for c in 0..3 {
                let mut val = look.background(cx, cy, c);
                if coverage > 0.0 {
                    val = coverage * look.foreground(u, v, c) + (1.0 - coverage) * val;
                }
                if spec.noise > 0.0 {
                    val += rng.random_range(-spec.noise..=spec.noise);
                }
                data.push(val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Frame::new(spec.width, spec.height, data)
}

/// Reflects `pos` into `[lo, hi]`, returning the new position and whether it bounced.
fn reflect(pos: f64, lo: f64, hi: f64) -> (f64, bool) {
    if hi <= lo {
        return (lo, pos != lo);
    }
    if pos < lo {
        ((2.0 * lo - pos).min(hi), true)
    } else if pos > hi {
        ((2.0 * hi - pos).max(lo), true)
    } else {
        (pos, false)
    }
}

/// Generates one video; identical `(spec, seed)` pairs give identical output.
pub fn generate_synthetic_video(spec: &SyntheticSpec, seed: u64, id: &str) -> Result<Video> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let look = Appearance::random(spec, &mut rng);
    let (fw, fh) = (spec.width as f64, spec.height as f64);

    let mut w = rng.random_range(spec.min_size..=spec.max_size);
    let mut h = rng.random_range(spec.min_size..=spec.max_size);
    let mut cx = rng.random_range(w / 2.0..=fw - w / 2.0);
    let mut cy = rng.random_range(h / 2.0..=fh - h / 2.0);
    let angle = rng.random_range(0.0..2.0 * PI);
    let (mut vx, mut vy) = match spec.motion {
        MotionModel::Linear => (spec.speed * angle.cos(), spec.speed * angle.sin()),
        MotionModel::RandomWalk => {
            let s = spec.speed.min(spec.max_step);
            (s * angle.cos(), s * angle.sin())
        }
    };
    let log_scale = Normal::new(0.0, spec.scale_drift.max(1e-300))
        .map_err(|e| Error::invalid(format!("scale drift: {e}")))?;

    let mut frames = Vec::with_capacity(spec.length);
    let mut boxes = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        if t > 0 {
            if spec.motion == MotionModel::RandomWalk {
                vx += rng.random_range(-spec.accel..=spec.accel);
                vy += rng.random_range(-spec.accel..=spec.accel);
                let norm = vx.hypot(vy);
                if norm > spec.max_step {
                    vx *= spec.max_step / norm;
                    vy *= spec.max_step / norm;
                }
            }
            let (nx, bx) = reflect(cx + vx, w / 2.0, fw - w / 2.0);
            let (ny, by) = reflect(cy + vy, h / 2.0, fh - h / 2.0);
            if bx {
                vx = -vx;
            }
            if by {
                vy = -vy;
            }
            cx = nx;
            cy = ny;
            if spec.scale_drift > 0.0 {
                let s = log_scale.sample(&mut rng).exp();
                let (nw, nh) = (w * s, h * s);
                let fits = nw >= spec.min_size
                    && nw <= spec.max_size
                    && nh >= spec.min_size
                    && nh <= spec.max_size
                    && cx - nw / 2.0 >= 0.0
                    && cx + nw / 2.0 <= fw
                    && cy - nh / 2.0 >= 0.0
                    && cy + nh / 2.0 <= fh;
                if fits {
                    w = nw;
                    h = nh;
                }
            }
        }
        let b = BoundingBox::from_center(cx, cy, w, h);
        frames.push(Arc::new(render(spec, &look, &b, &mut rng)?));
        boxes.push(b);
    }
    Video::new(id, frames, boxes)
}

/// Per-video seed derived from a dataset seed and the video's index.
pub fn video_seed(dataset_seed: u64, index: usize) -> u64 {
    dataset_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((index as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

/// `count` videos named `{prefix}{index:04}`.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    seed: u64,
    count: usize,
    prefix: &str,
) -> Result<Vec<Video>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_synthetic_video(spec, video_seed(seed, i), &format!("{prefix}{i:04}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            width: 48,
            height: 40,
            length: 30,
            min_size: 8.0,
            max_size: 16.0,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic_video(&small(), 11, "a").unwrap();
        let b = generate_synthetic_video(&small(), 11, "a").unwrap();
        let c = generate_synthetic_video(&small(), 12, "a").unwrap();
        assert_eq!(a.ground_truth(), b.ground_truth());
        assert!(a.frames().iter().zip(b.frames()).all(|(x, y)| x == y));
        assert_ne!(a.ground_truth(), c.ground_truth());
    }

    #[test]
    fn static_spec_keeps_box_constant() {
        let spec = SyntheticSpec {
            motion: MotionModel::Linear,
            speed: 0.0,
            scale_drift: 0.0,
            ..small()
        };
        let v = generate_synthetic_video(&spec, 3, "s").unwrap();
        assert!(v.ground_truth().iter().all(|b| *b == v.ground_truth()[0]));
    }

    #[test]
    fn random_walk_step_bound() {
        let spec = SyntheticSpec {
            motion: MotionModel::RandomWalk,
            max_step: 2.0,
            accel: 1.5,
            length: 200,
            ..small()
        };
        for seed in 0..10 {
            let v = generate_synthetic_video(&spec, seed, "rw").unwrap();
            for pair in v.ground_truth().windows(2) {
                assert!(pair[0].center_distance(&pair[1]) <= 2.0 + 1e-9);
            }
        }
    }

    #[test]
    fn boxes_stay_inside_frame() {
        let spec = SyntheticSpec {
            motion: MotionModel::Linear,
            speed: 5.0,
            scale_drift: 0.05,
            length: 120,
            ..small()
        };
        let frame = BoundingBox::new(0.0, 0.0, spec.width as f64, spec.height as f64);
        for seed in 0..5 {
            let v = generate_synthetic_video(&spec, seed, "in").unwrap();
            for b in v.ground_truth() {
                assert!(b.x >= -1e-9 && b.y >= -1e-9);
                assert!(b.right() <= frame.w + 1e-9 && b.bottom() <= frame.h + 1e-9);
                assert!(b.w >= spec.min_size - 1e-9 && b.h >= spec.min_size - 1e-9);
                assert!(crate::geometry::iou(b, &frame).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn object_visible_against_background() {
        let spec = SyntheticSpec {
            noise: 0.0,
            ..small()
        };
        let v = generate_synthetic_video(&spec, 5, "vis").unwrap();
        let g = v.ground_truth()[0];
        let (cx, cy) = g.center();
        let inside = v.frame(0).pixel(cx as usize, cy as usize);
        let outside = v.frame(0).pixel(0, 0);
        let diff: i32 = inside
            .iter()
            .zip(outside.iter())
            .map(|(a, b)| (*a as i32 - *b as i32).abs())
            .sum();
        assert!(diff > 60, "inside {inside:?} outside {outside:?}");
    }

    #[test]
    fn rejects_oversized_object() {
        let spec = SyntheticSpec {
            max_size: 100.0,
            ..small()
        };
        assert!(matches!(
            generate_synthetic_video(&spec, 0, "x"),
            Err(Error::InvalidInput(_))
        ));
    }
}

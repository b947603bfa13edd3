//! The tracking decision process over one video: states are pairs of crops
//! around the previous box, actions move that box, rewards score overlap
//! with the ground truth.

use serde::{Deserialize, Serialize};

use super::video::Video;
use crate::error::{Error, Result};
use crate::frame::{Frame, Patch};
use crate::geometry::{apply_action, context_region, crop_patch, iou_unchecked, Action, BoundingBox};

/// Crop geometry shared by training and inference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropConfig {
    /// Context factor applied to the previous box before cropping.
    pub context: f64,
    /// Patch `(width, height)` in pixels.
    pub patch_size: (usize, usize),
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            context: 1.5,
            patch_size: (32, 32),
        }
    }
}

/// Two crops of consecutive frames taken at the same region.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub patch_prev: Patch,
    pub patch_cur: Patch,
    /// Box the crop region was derived from.
    pub anchor: BoundingBox,
}

pub fn make_state(
    frame_prev: &Frame,
    frame_cur: &Frame,
    b_prev: &BoundingBox,
    crop: &CropConfig,
) -> Result<State> {
    if frame_prev.width() != frame_cur.width() || frame_prev.height() != frame_cur.height() {
        return Err(Error::invalid("state frames differ in size"));
    }
    if crop.context.is_nan() || crop.context <= 0.0 {
        return Err(Error::invalid("context factor must be positive"));
    }
    let region = context_region(b_prev, crop.context);
    Ok(State {
        patch_prev: crop_patch(frame_prev, &region, crop.patch_size)?,
        patch_cur: crop_patch(frame_cur, &region, crop.patch_size)?,
        anchor: *b_prev,
    })
}

/// Overlap threshold below which the reward is -1.
pub const REWARD_IOU_THRESHOLD: f64 = 0.5;
const OMEGA_STEP: f64 = 0.05;
const OMEGA_NUDGE: f64 = 1e-9;

/// Floors `z` to a multiple of 0.05 and maps `[0, 1]` onto `[-1, 1]`.
pub fn omega(z: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&z) {
        return Err(Error::invalid(format!("omega argument {z} outside [0, 1]")));
    }
    Ok(omega_unchecked(z))
}

fn omega_unchecked(z: f64) -> f64 {
    2.0 * (((z + OMEGA_NUDGE) / OMEGA_STEP).floor() * OMEGA_STEP) - 1.0
}

/// Quantized overlap reward for an IoU value.
pub fn reward_from_iou(overlap: f64) -> f64 {
    if overlap >= REWARD_IOU_THRESHOLD {
        omega_unchecked(overlap.min(1.0))
    } else {
        -1.0
    }
}

pub fn reward(b: &BoundingBox, g: &BoundingBox) -> f64 {
    debug_assert!(b.is_valid() && g.is_valid());
    reward_from_iou(iou_unchecked(b, g))
}

#[derive(Clone, Debug)]
pub struct Transition {
    /// `None` once the episode is over.
    pub next_state: Option<State>,
    pub reward: f64,
    pub done: bool,
    /// Box produced by the action.
    pub bbox: BoundingBox,
}

/// One episode over `video[0..=terminal]`, starting from the first ground-truth box.
#[derive(Debug)]
pub struct TrackingMdp<'a> {
    video: &'a Video,
    t: usize,
    b_prev: BoundingBox,
    crop: CropConfig,
    terminal: usize,
    done: bool,
}

impl<'a> TrackingMdp<'a> {
    pub fn new(video: &'a Video, terminal: usize, crop: CropConfig) -> Result<Self> {
        if terminal < 1 || terminal > video.len() - 1 {
            return Err(Error::invalid(format!(
                "terminal index {terminal} outside [1, {}]",
                video.len() - 1
            )));
        }
        Ok(Self {
            video,
            t: 1,
            b_prev: video.ground_truth()[0],
            crop,
            terminal,
            done: false,
        })
    }

    /// Index of the frame the next action predicts.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn terminal(&self) -> usize {
        self.terminal
    }

    pub fn b_prev(&self) -> BoundingBox {
        self.b_prev
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn video(&self) -> &'a Video {
        self.video
    }

    /// Ground truth of the frame the next action predicts.
    pub fn target(&self) -> BoundingBox {
        self.video.ground_truth()[self.t]
    }

    pub fn crop(&self) -> &CropConfig {
        &self.crop
    }

    pub fn current_state(&self) -> Result<State> {
        if self.done {
            return Err(Error::Protocol("episode already finished".into()));
        }
        make_state(
            self.video.frame(self.t - 1),
            self.video.frame(self.t),
            &self.b_prev,
            &self.crop,
        )
    }

    pub fn step(&mut self, action: &Action) -> Result<Transition> {
        if self.done {
            return Err(Error::Protocol("step after episode end".into()));
        }
        let bbox = apply_action(action, &self.b_prev);
        let r = reward(&bbox, &self.video.ground_truth()[self.t]);
        self.b_prev = bbox;
        self.done = self.t == self.terminal;
        self.t += 1;
        let next_state = if self.done {
            None
        } else {
            Some(self.current_state()?)
        };
        Ok(Transition {
            next_state,
            reward: r,
            done: self.done,
            bbox,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::synthetic::{generate_synthetic_video, MotionModel, SyntheticSpec};
    use crate::geometry::{infer_action, iou};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn omega_examples() {
        assert_eq!(omega(1.0).unwrap(), 1.0);
        assert!(omega(0.5).unwrap().abs() < 1e-12);
        assert!((omega(0.73).unwrap() - 0.40).abs() < 1e-12);
        assert!(omega(1.01).is_err());
        assert!(omega(-0.1).is_err());
    }

    #[test]
    fn reward_examples() {
        let g = BoundingBox::new(3.0, 4.0, 10.0, 10.0);
        assert_eq!(reward(&g, &g), 1.0);
        assert_eq!(reward_from_iou(0.49), -1.0);
        assert!(reward_from_iou(0.5).abs() < 1e-12);
        assert!((reward_from_iou(0.73) - 0.40).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn omega_monotone_plateaus(a in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(omega(lo).unwrap() <= omega(hi).unwrap());
            let k = ((lo + 1e-9) / 0.05).floor();
            let plateau_start = k * 0.05;
            prop_assert!((omega(lo).unwrap() - (2.0 * plateau_start - 1.0)).abs() < 1e-12);
        }

        #[test]
        fn reward_symmetric(
            a in (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64),
            b in (0.0..50.0f64, 0.0..50.0f64, 1.0..30.0f64, 1.0..30.0f64),
        ) {
            let a = BoundingBox::new(a.0, a.1, a.2, a.3);
            let b = BoundingBox::new(b.0, b.1, b.2, b.3);
            prop_assert_eq!(reward(&a, &b), reward(&b, &a));
        }
    }

    fn static_video() -> Video {
        let spec = SyntheticSpec {
            width: 32,
            height: 32,
            length: 6,
            min_size: 8.0,
            max_size: 12.0,
            motion: MotionModel::Linear,
            speed: 0.0,
            scale_drift: 0.0,
            ..SyntheticSpec::default()
        };
        generate_synthetic_video(&spec, 1, "static").unwrap()
    }

    #[test]
    fn make_state_examples() {
        let f = Frame::filled(16, 16, [9, 9, 9]).unwrap();
        let b = BoundingBox::new(2.0, 3.0, 5.0, 4.0);
        let crop = CropConfig::default();
        assert_eq!(crop.context, 1.5);
        let s = make_state(&f, &f, &b, &crop).unwrap();
        assert_eq!(s.patch_prev, s.patch_cur);
        assert_eq!(s.anchor, b);
        assert_eq!(s.patch_cur.size(), (32, 32));
    }

    #[test]
    fn zero_action_on_static_target() {
        let v = static_video();
        let mut mdp = TrackingMdp::new(&v, 5, CropConfig::default()).unwrap();
        for t in 1..=5 {
            let tr = mdp.step(&Action::ZERO).unwrap();
            assert_eq!(tr.reward, 1.0);
            assert_eq!(tr.done, t == 5);
            assert_eq!(tr.next_state.is_none(), t == 5);
        }
        assert!(matches!(mdp.step(&Action::ZERO), Err(Error::Protocol(_))));
    }

    #[test]
    fn scripted_three_frame_rewards() {
        let f = Arc::new(Frame::filled(64, 64, [50, 50, 50]).unwrap());
        let gt = vec![
            BoundingBox::new(10.0, 10.0, 10.0, 10.0),
            BoundingBox::new(12.0, 10.0, 10.0, 10.0),
            BoundingBox::new(14.0, 10.0, 10.0, 10.0),
        ];
        let v = Video::new("scripted", vec![f.clone(), f.clone(), f], gt).unwrap();
        let mut mdp = TrackingMdp::new(&v, 2, CropConfig::default()).unwrap();
        // Step 1: move 0.1 w = 1 px right. Box [11,10,10,10] vs [12,10,10,10]:
        // inter 90, union 110 -> IoU 0.8181 -> floor 0.80 -> reward 0.60.
        let r1 = mdp.step(&Action::new(0.1, 0.0, 0.0, 0.0)).unwrap();
        assert!((r1.reward - 0.6).abs() < 1e-12);
        // Step 2: from [11,10,10,10] move 0.6 w -> [17,..] vs [14,..]:
        // inter 70, union 130 -> IoU 0.538 -> floor 0.50 -> reward 0.0.
        let r2 = mdp.step(&Action::new(0.6, 0.0, 0.0, 0.0)).unwrap();
        assert!(r2.reward.abs() < 1e-12);
        assert!(r2.done);
        assert_eq!(r2.bbox, BoundingBox::new(17.0, 10.0, 10.0, 10.0));
    }

    #[test]
    fn b_prev_is_fold_of_actions() {
        let v = static_video();
        let mut mdp = TrackingMdp::new(&v, 5, CropConfig::default()).unwrap();
        let actions = [
            Action::new(0.1, -0.2, 0.05, 0.0),
            Action::new(-0.3, 0.1, 0.0, -0.1),
            Action::new(0.0, 0.0, 0.2, 0.2),
            Action::new(0.5, 0.5, -0.5, -0.5),
            Action::new(-1.0, 1.0, 1.0, -1.0),
        ];
        let mut folded = v.ground_truth()[0];
        for a in &actions {
            let tr = mdp.step(a).unwrap();
            folded = apply_action(a, &folded);
            assert_eq!(tr.bbox, folded);
            assert_eq!(mdp.b_prev(), folded);
        }
        // Ground-truth action reproduces the target exactly.
        let g = v.ground_truth()[1];
        let a = infer_action(&g, &v.ground_truth()[0]);
        assert!((iou(&apply_action(&a, &v.ground_truth()[0]), &g).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terminal_bounds_checked() {
        let v = static_video();
        assert!(TrackingMdp::new(&v, 0, CropConfig::default()).is_err());
        assert!(TrackingMdp::new(&v, 6, CropConfig::default()).is_err());
    }
}

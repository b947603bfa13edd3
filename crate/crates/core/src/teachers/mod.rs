//! Teacher trackers: the session contract, built-in teachers and
//! best-teacher selection.
//!
//! A [`Teacher`] is a factory that opens one [`TeacherSession`] per video.
//! Sessions are fed frames strictly in temporal order, starting with `init`
//! on frame 0.

mod external;
mod oracle;
mod trace;

use std::path::Path;

pub use external::{ExternalTeacher, EXTERNAL_TIMEOUT};
pub use oracle::{NoiseLevel, OracleNoiseTeacher};
pub use trace::{TraceTeacher, TrajectoryTrace};

use crate::environment::Video;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::{infer_action, iou_unchecked, Action, BoundingBox};

/// What a session sees of one frame.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub video_id: &'a str,
    pub index: usize,
    pub frame: &'a Frame,
    pub path: Option<&'a Path>,
}

impl<'a> FrameInput<'a> {
    pub fn of(video: &'a Video, index: usize) -> Self {
        Self {
            video_id: video.id(),
            index,
            frame: video.frame(index),
            path: video.frame_path(index).map(|p| p.as_path()),
        }
    }
}

pub trait TeacherSession: Send {
    fn id(&self) -> &str;

    /// Primes the session on frame 0 with the target box.
    fn init(&mut self, input: FrameInput<'_>, g0: BoundingBox) -> Result<()>;

    /// Predicts the box for the next frame in order.
    fn predict(&mut self, input: FrameInput<'_>) -> Result<BoundingBox>;

    /// Latest box: `g0` right after init, then the last prediction.
    fn current(&self) -> Option<BoundingBox>;
}

pub trait Teacher: Send + Sync {
    fn id(&self) -> &str;

    /// Opens a fresh, uninitialized session for `video`.
    fn session(&self, video: &Video) -> Result<Box<dyn TeacherSession>>;
}

/// Init-once / in-order bookkeeping shared by the built-in sessions.
#[derive(Debug, Default)]
pub(crate) struct SessionCursor {
    current: Option<BoundingBox>,
    next_index: usize,
}

impl SessionCursor {
    pub(crate) fn init(&mut self, teacher: &str, input: &FrameInput<'_>, g0: BoundingBox) -> Result<()> {
        if self.current.is_some() {
            return Err(Error::Protocol(format!("teacher `{teacher}` initialized twice")));
        }
        if input.index != 0 {
            return Err(Error::Protocol(format!(
                "teacher `{teacher}` must be initialized on frame 0, got {}",
                input.index
            )));
        }
        g0.validate()?;
        self.current = Some(g0);
        self.next_index = 1;
        Ok(())
    }

    pub(crate) fn check_predict(&self, teacher: &str, input: &FrameInput<'_>) -> Result<()> {
        if self.current.is_none() {
            return Err(Error::Protocol(format!("teacher `{teacher}` used before init")));
        }
        if input.index != self.next_index {
            return Err(Error::Protocol(format!(
                "teacher `{teacher}` expected frame {}, got {}",
                self.next_index, input.index
            )));
        }
        Ok(())
    }

    pub(crate) fn advance(&mut self, b: BoundingBox) {
        self.current = Some(b);
        self.next_index += 1;
    }

    pub(crate) fn current(&self) -> Option<BoundingBox> {
        self.current
    }
}

/// Runs a teacher over a whole video; element 0 is the ground-truth init box.
pub fn run_teacher(teacher: &dyn Teacher, video: &Video) -> Result<TrajectoryTrace> {
    let mut session = teacher.session(video)?;
    let g0 = video.ground_truth()[0];
    session.init(FrameInput::of(video, 0), g0)?;
    let mut boxes = Vec::with_capacity(video.len());
    boxes.push(g0);
    for t in 1..video.len() {
        boxes.push(session.predict(FrameInput::of(video, t))?);
    }
    Ok(TrajectoryTrace::new(teacher.id(), video.id(), boxes))
}

/// Index of the prediction with the highest overlap with `g`; ties go to the lowest index.
pub fn best_teacher(predictions: &[BoundingBox], g: &BoundingBox) -> Result<usize> {
    if predictions.is_empty() {
        return Err(Error::invalid("best_teacher on an empty pool"));
    }
    g.validate()?;
    let mut best = 0;
    let mut best_iou = f64::NEG_INFINITY;
    for (i, p) in predictions.iter().enumerate() {
        p.validate()?;
        let v = iou_unchecked(p, g);
        if v > best_iou {
            best = i;
            best_iou = v;
        }
    }
    Ok(best)
}

/// Action the teacher would take to move `b_prev` onto its own prediction.
pub fn teacher_action(b_teacher: &BoundingBox, b_prev: &BoundingBox) -> Action {
    infer_action(b_teacher, b_prev)
}

/// FNV-1a, used to derive stable per-video seeds.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

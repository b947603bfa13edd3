//! Inference with a trained student: on its own (TRAS), handing control to a
//! teacher when the value head prefers it (TRAST), or choosing among a pool
//! of teachers by value (TRASFUST).

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::environment::{make_state, CropConfig, Video};
use crate::error::{Error, Result};
use crate::geometry::{apply_action, iou_unchecked, BoundingBox};
use crate::student::{forward, HiddenSchedule, HiddenState, ModelParameters};
use crate::teachers::{run_teacher, FrameInput, Teacher, TeacherSession};

pub const STUDENT_CONTROLLER: &str = "student";

/// How candidate boxes are scored when choosing between them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Evaluator {
    /// The student's value head on the candidate's state.
    #[default]
    ValueHead,
    /// True IoU of the candidate box with the ground truth (testing only).
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub t: usize,
    pub bbox: BoundingBox,
    pub controller: String,
    pub v_student: Option<f64>,
    /// One entry per teacher in [`TrackRun::teacher_ids`].
    pub v_teachers: Vec<Option<f64>>,
}

/// Output of one tracker on one video, frames `1..T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub video_id: String,
    pub teacher_ids: Vec<String>,
    pub frames: Vec<FrameRecord>,
    /// Set when a teacher failed; `frames` then holds what was produced before.
    pub failure: Option<String>,
}

impl TrackRun {
    fn new(video: &Video, teacher_ids: Vec<String>) -> Self {
        Self {
            video_id: video.id().to_string(),
            teacher_ids,
            frames: Vec::with_capacity(video.len().saturating_sub(1)),
            failure: None,
        }
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.frames.iter().map(|f| f.bbox).collect()
    }

    pub fn is_complete(&self, video: &Video) -> bool {
        self.failure.is_none() && self.frames.len() + 1 == video.len()
    }

    /// Per-frame IoU against the ground truth.
    pub fn ious(&self, video: &Video) -> Vec<f64> {
        self.frames
            .iter()
            .map(|f| iou_unchecked(&f.bbox, &video.ground_truth()[f.t]))
            .collect()
    }

    pub fn center_errors(&self, video: &Video) -> Vec<f64> {
        self.frames
            .iter()
            .map(|f| f.bbox.center_distance(&video.ground_truth()[f.t]))
            .collect()
    }

    /// Fraction of frames controlled by something other than the student.
    pub fn teacher_fraction(&self) -> f64 {
        if self.frames.is_empty() {
            return 0.0;
        }
        let n = self.frames.iter().filter(|f| f.controller != STUDENT_CONTROLLER).count();
        n as f64 / self.frames.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,y,w,h,controller,v_student");
        for id in &self.teacher_ids {
            let _ = write!(out, ",v_teacher_{id}");
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.frames {
            let b = f.bbox;
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                f.t,
                b.x,
                b.y,
                b.w,
                b.h,
                f.controller,
                cell(f.v_student)
            );
            for v in &f.v_teachers {
                let _ = write!(out, ",{}", cell(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

fn state_at(video: &Video, t: usize, b_prev: &BoundingBox, crop: &CropConfig) -> Result<crate::environment::State> {
    make_state(video.frame(t - 1), video.frame(t), b_prev, crop)
}

/// Autonomous tracking with the policy mean.
pub fn tras(video: &Video, params: &ModelParameters, crop: &CropConfig) -> Result<TrackRun> {
    let mut run = TrackRun::new(video, Vec::new());
    let mut sched = HiddenSchedule::new(params.arch().hidden_size());
    let mut hidden = sched.reset_hidden();
    let mut b = video.ground_truth()[0];
    for t in 1..video.len() {
        let input = sched.input_for(t, hidden);
        let (out, next) = forward(params, &state_at(video, t, &b, crop)?, &input)?;
        sched.record(t, &next);
        hidden = next;
        b = apply_action(&out.action, &b);
        run.frames.push(FrameRecord {
            t,
            bbox: b,
            controller: STUDENT_CONTROLLER.into(),
            v_student: Some(out.value),
            v_teachers: Vec::new(),
        });
    }
    Ok(run)
}

fn open_session(teacher: &dyn Teacher, video: &Video) -> Result<Box<dyn TeacherSession>> {
    let mut s = teacher.session(video)?;
    s.init(FrameInput::of(video, 0), video.ground_truth()[0])?;
    Ok(s)
}

/// Student tracking with per-frame hand-off to `teacher` when its state is
/// valued higher. Ties keep the student. The student's hidden state is kept
/// across hand-offs.
pub fn trast(
    video: &Video,
    params: &ModelParameters,
    crop: &CropConfig,
    teacher: &dyn Teacher,
    evaluator: Evaluator,
) -> Result<TrackRun> {
    let mut run = TrackRun::new(video, vec![teacher.id().to_string()]);
    let mut session = match open_session(teacher, video) {
        Ok(s) => s,
        Err(e) => {
            run.failure = Some(e.to_string());
            return Ok(run);
        }
    };
    let mut sched = HiddenSchedule::new(params.arch().hidden_size());
    let mut hidden = sched.reset_hidden();
    let mut b = video.ground_truth()[0];
    let mut b_teacher_prev = b;
    for t in 1..video.len() {
        let input = sched.input_for(t, hidden);
        let (out, next) = forward(params, &state_at(video, t, &b, crop)?, &input)?;
        let b_student = apply_action(&out.action, &b);
        let b_teacher = match session.predict(FrameInput::of(video, t)) {
            Ok(bt) => bt,
            Err(e) => {
                run.failure = Some(e.to_string());
                return Ok(run);
            }
        };
        let (v_s, v_t) = match evaluator {
            Evaluator::ValueHead => {
                let (o, _) = forward(params, &state_at(video, t, &b_teacher_prev, crop)?, &input)?;
                (out.value, o.value)
            }
            Evaluator::Oracle => {
                let g = &video.ground_truth()[t];
                (iou_unchecked(&b_student, g), iou_unchecked(&b_teacher, g))
            }
        };
        let (chosen, controller) = if v_s >= v_t {
            (b_student, STUDENT_CONTROLLER.to_string())
        } else {
            (b_teacher, teacher.id().to_string())
        };
        sched.record(t, &next);
        hidden = next;
        b = chosen;
        b_teacher_prev = b_teacher;
        run.frames.push(FrameRecord {
            t,
            bbox: chosen,
            controller,
            v_student: Some(v_s),
            v_teachers: vec![Some(v_t)],
        });
    }
    Ok(run)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Fusion of a teacher pool: each frame outputs the box of the teacher
/// whose state is valued highest. Teachers run on their own chains; the
/// student's hidden state follows the chosen teacher's state.
pub fn trasfust(
    video: &Video,
    params: &ModelParameters,
    crop: &CropConfig,
    pool: &[&dyn Teacher],
    evaluator: Evaluator,
) -> Result<TrackRun> {
    if pool.is_empty() {
        return Err(Error::invalid("empty teacher pool"));
    }
    let mut run = TrackRun::new(video, pool.iter().map(|t| t.id().to_string()).collect());
    let mut sessions = Vec::with_capacity(pool.len());
    for t in pool {
        match open_session(*t, video) {
            Ok(s) => sessions.push(s),
            Err(e) => {
                run.failure = Some(e.to_string());
                return Ok(run);
            }
        }
    }
    let mut sched = HiddenSchedule::new(params.arch().hidden_size());
    let mut hidden = sched.reset_hidden();
    let mut prev = vec![video.ground_truth()[0]; pool.len()];
    for t in 1..video.len() {
        let input = sched.input_for(t, hidden);
        let mut preds = Vec::with_capacity(pool.len());
        for s in sessions.iter_mut() {
            match s.predict(FrameInput::of(video, t)) {
                Ok(b) => preds.push(b),
                Err(e) => {
                    run.failure = Some(e.to_string());
                    return Ok(run);
                }
            }
        }
        let mut values = Vec::with_capacity(pool.len());
        let mut hiddens: Vec<HiddenState> = Vec::with_capacity(pool.len());
        for (k, pred) in preds.iter().enumerate() {
            match evaluator {
                Evaluator::ValueHead => {
                    let (o, h) = forward(params, &state_at(video, t, &prev[k], crop)?, &input)?;
                    values.push(o.value);
                    hiddens.push(h);
                }
                Evaluator::Oracle => values.push(iou_unchecked(pred, &video.ground_truth()[t])),
            }
        }
        let k = argmax(&values);
        hidden = if hiddens.is_empty() { input } else { hiddens.swap_remove(k) };
        sched.record(t, &hidden);
        run.frames.push(FrameRecord {
            t,
            bbox: preds[k],
            controller: pool[k].id().to_string(),
            v_student: None,
            v_teachers: values.into_iter().map(Some).collect(),
        });
        prev = preds;
    }
    Ok(run)
}

/// Anything that can be run once over a video.
pub trait Tracker: Send + Sync {
    fn id(&self) -> &str;
    fn track(&self, video: &Video) -> Result<TrackRun>;
}

pub struct TrasTracker {
    pub id: String,
    pub params: ModelParameters,
    pub crop: CropConfig,
}

impl Tracker for TrasTracker {
    fn id(&self) -> &str {
        &self.id
    }

    fn track(&self, video: &Video) -> Result<TrackRun> {
        tras(video, &self.params, &self.crop)
    }
}

pub struct TrastTracker {
    pub id: String,
    pub params: ModelParameters,
    pub crop: CropConfig,
    pub teacher: Arc<dyn Teacher>,
    pub evaluator: Evaluator,
}

impl Tracker for TrastTracker {
    fn id(&self) -> &str {
        &self.id
    }

    fn track(&self, video: &Video) -> Result<TrackRun> {
        trast(video, &self.params, &self.crop, self.teacher.as_ref(), self.evaluator)
    }
}

pub struct TrasfustTracker {
    pub id: String,
    pub params: ModelParameters,
    pub crop: CropConfig,
    pub pool: Vec<Arc<dyn Teacher>>,
    pub evaluator: Evaluator,
}

impl Tracker for TrasfustTracker {
    fn id(&self) -> &str {
        &self.id
    }

    fn track(&self, video: &Video) -> Result<TrackRun> {
        let pool: Vec<&dyn Teacher> = self.pool.iter().map(|t| t.as_ref()).collect();
        trasfust(video, &self.params, &self.crop, &pool, self.evaluator)
    }
}

/// A teacher on its own, for baseline comparisons.
pub struct TeacherTracker(pub Arc<dyn Teacher>);

impl Tracker for TeacherTracker {
    fn id(&self) -> &str {
        self.0.id()
    }

    fn track(&self, video: &Video) -> Result<TrackRun> {
        let mut run = TrackRun::new(video, Vec::new());
        match run_teacher(self.0.as_ref(), video) {
            Ok(trace) => {
                run.frames = trace.boxes()[1..]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| FrameRecord {
                        t: i + 1,
                        bbox: *b,
                        controller: self.0.id().to_string(),
                        v_student: None,
                        v_teachers: Vec::new(),
                    })
                    .collect();
            }
            Err(e) => run.failure = Some(e.to_string()),
        }
        Ok(run)
    }
}

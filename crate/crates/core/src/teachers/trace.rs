use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{FrameInput, SessionCursor, Teacher, TeacherSession};
use crate::environment::dataset::{read_box_file, write_box_file};
use crate::environment::Video;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

/// Per-frame boxes one teacher produced on one video. Index 0 is the init box.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryTrace {
    teacher_id: String,
    video_id: String,
    boxes: Vec<BoundingBox>,
}

impl TrajectoryTrace {
    pub fn new(teacher_id: impl Into<String>, video_id: impl Into<String>, boxes: Vec<BoundingBox>) -> Self {
        Self {
            teacher_id: teacher_id.into(),
            video_id: video_id.into(),
            boxes,
        }
    }

    pub fn teacher_id(&self) -> &str {
        &self.teacher_id
    }

    pub fn video_id(&self) -> &str {
        &self.video_id
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// `<dir>/<teacher_id>/<video_id>.csv`
    pub fn path_in(dir: &Path, teacher_id: &str, video_id: &str) -> PathBuf {
        dir.join(teacher_id).join(format!("{video_id}.csv"))
    }

    pub fn load(dir: &Path, teacher_id: &str, video_id: &str) -> Result<Self> {
        let boxes = read_box_file(&Self::path_in(dir, teacher_id, video_id))?;
        Ok(Self::new(teacher_id, video_id, boxes))
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path_in(dir, &self.teacher_id, &self.video_id);
        write_box_file(&path, &self.boxes)?;
        Ok(path)
    }
}

enum TraceSource {
    Dir(PathBuf),
    Memory(HashMap<String, Arc<Vec<BoundingBox>>>),
}

/// Replays recorded teacher predictions verbatim.
pub struct TraceTeacher {
    id: String,
    source: TraceSource,
}

impl TraceTeacher {
    /// Reads traces lazily from `<dir>/<id>/<video_id>.csv`.
    pub fn from_dir(id: impl Into<String>, dir: impl Into<PathBuf>) -> Self {
        Self {
            id: id.into(),
            source: TraceSource::Dir(dir.into()),
        }
    }

    pub fn from_traces(id: impl Into<String>, traces: impl IntoIterator<Item = TrajectoryTrace>) -> Self {
        let map = traces
            .into_iter()
            .map(|t| (t.video_id, Arc::new(t.boxes)))
            .collect();
        Self {
            id: id.into(),
            source: TraceSource::Memory(map),
        }
    }
}

impl Teacher for TraceTeacher {
    fn id(&self) -> &str {
        &self.id
    }

    fn session(&self, video: &Video) -> Result<Box<dyn TeacherSession>> {
        let boxes = match &self.source {
            TraceSource::Dir(dir) => Arc::new(TrajectoryTrace::load(dir, &self.id, video.id())?.boxes),
            TraceSource::Memory(map) => map.get(video.id()).cloned().ok_or_else(|| Error::Teacher {
                teacher: self.id.clone(),
                message: format!("no trace for video `{}`", video.id()),
            })?,
        };
        if boxes.len() != video.len() {
            return Err(Error::Teacher {
                teacher: self.id.clone(),
                message: format!(
                    "trace for `{}` has {} boxes, video has {} frames",
                    video.id(),
                    boxes.len(),
                    video.len()
                ),
            });
        }
        Ok(Box::new(TraceSession {
            id: self.id.clone(),
            video_id: video.id().to_string(),
            boxes,
            cursor: SessionCursor::default(),
        }))
    }
}

struct TraceSession {
    id: String,
    video_id: String,
    boxes: Arc<Vec<BoundingBox>>,
    cursor: SessionCursor,
}

impl TeacherSession for TraceSession {
    fn id(&self) -> &str {
        &self.id
    }

    fn init(&mut self, input: FrameInput<'_>, g0: BoundingBox) -> Result<()> {
        if input.video_id != self.video_id {
            return Err(Error::Teacher {
                teacher: self.id.clone(),
                message: format!(
                    "trace recorded on `{}` replayed on `{}`",
                    self.video_id, input.video_id
                ),
            });
        }
        self.cursor.init(&self.id, &input, g0)
    }

    fn predict(&mut self, input: FrameInput<'_>) -> Result<BoundingBox> {
        self.cursor.check_predict(&self.id, &input)?;
        let b = self.boxes[input.index];
        self.cursor.advance(b);
        Ok(b)
    }

    fn current(&self) -> Option<BoundingBox> {
        self.cursor.current()
    }
}

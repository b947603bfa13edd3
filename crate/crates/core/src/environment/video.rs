use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::BoundingBox;

/// An annotated frame sequence with one ground-truth box per frame.
///
/// Frames are reference counted so sub-sequences (training chunks) share
/// pixel storage with the source video.
#[derive(Clone, Debug)]
pub struct Video {
    id: String,
    frames: Vec<Arc<Frame>>,
    ground_truth: Vec<BoundingBox>,
    frame_paths: Option<Vec<PathBuf>>,
}

impl Video {
    pub fn new(
        id: impl Into<String>,
        frames: Vec<Arc<Frame>>,
        ground_truth: Vec<BoundingBox>,
    ) -> Result<Self> {
        let id = id.into();
        if frames.len() != ground_truth.len() {
            return Err(Error::invalid(format!(
                "video `{id}`: {} frames but {} ground-truth boxes",
                frames.len(),
                ground_truth.len()
            )));
        }
        if frames.len() < 2 {
            return Err(Error::invalid(format!("video `{id}` has fewer than 2 frames")));
        }
        let (w, h) = (frames[0].width(), frames[0].height());
        if frames.iter().any(|f| f.width() != w || f.height() != h) {
            return Err(Error::invalid(format!("video `{id}` mixes frame sizes")));
        }
        if let Some(i) = ground_truth.iter().position(|b| !b.is_valid()) {
            return Err(Error::invalid(format!(
                "video `{id}` frame {i}: degenerate ground truth"
            )));
        }
        Ok(Self {
            id,
            frames,
            ground_truth,
            frame_paths: None,
        })
    }

    pub fn with_frame_paths(mut self, paths: Vec<PathBuf>) -> Result<Self> {
        if paths.len() != self.frames.len() {
            return Err(Error::invalid("frame path count mismatch"));
        }
        self.frame_paths = Some(paths);
        Ok(self)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &Frame {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Arc<Frame>] {
        &self.frames
    }

    pub fn ground_truth(&self) -> &[BoundingBox] {
        &self.ground_truth
    }

    pub fn frame_path(&self, t: usize) -> Option<&PathBuf> {
        self.frame_paths.as_ref().map(|p| &p[t])
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames[0].width(), self.frames[0].height())
    }

    /// Contiguous window `[start, start + len)` sharing frame storage.
    pub fn window(&self, id: impl Into<String>, start: usize, len: usize) -> Result<Video> {
        if start + len > self.len() {
            return Err(Error::invalid(format!(
                "window {start}+{len} exceeds video `{}` of length {}",
                self.id,
                self.len()
            )));
        }
        let mut v = Video::new(
            id,
            self.frames[start..start + len].to_vec(),
            self.ground_truth[start..start + len].to_vec(),
        )?;
        if let Some(paths) = &self.frame_paths {
            v.frame_paths = Some(paths[start..start + len].to_vec());
        }
        Ok(v)
    }
}

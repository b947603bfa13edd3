//! On-disk annotated video layout:
//!
//! ```text
//! <root>/<sequence_id>/frames/000000.ppm   binary PPM (P6), one per frame
//! <root>/<sequence_id>/groundtruth.csv     one "x,y,w,h" line per frame
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::video::Video;
use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::geometry::BoundingBox;

pub const FRAMES_DIR: &str = "frames";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.csv";

/// Parses one `x,y,w,h` line.
pub fn parse_box_line(line: &str) -> std::result::Result<BoundingBox, String> {
    let fields: Vec<&str> = line.trim().split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 comma-separated values, got {}", fields.len()));
    }
    let mut v = [0.0; 4];
    for (slot, field) in v.iter_mut().zip(&fields) {
        *slot = field
            .parse::<f64>()
            .map_err(|e| format!("bad number `{field}`: {e}"))?;
    }
    let b = BoundingBox::from(v);
    if !b.is_valid() {
        return Err(format!("degenerate box `{}`", line.trim()));
    }
    Ok(b)
}

/// Reads a box-per-line CSV file. Blank trailing lines are ignored.
pub fn read_box_file(path: &Path) -> Result<Vec<BoundingBox>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut boxes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let b = parse_box_line(line).map_err(|message| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        })?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn format_box_line(b: &BoundingBox) -> String {
    format!("{},{},{},{}\n", b.x, b.y, b.w, b.h)
}

pub fn write_box_file(path: &Path, boxes: &[BoundingBox]) -> Result<()> {
    let text: String = boxes.iter().map(format_box_line).collect();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?
        .with_guessed_format()
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Frame::new(w as usize, h as usize, img.into_raw())
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let file = fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut out = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            frame.data(),
            frame.width() as u32,
            frame.height() as u32,
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    out.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn frame_file_name(t: usize) -> String {
    format!("{t:06}.ppm")
}

/// Writes one sequence directory under `root` and returns its path.
pub fn write_video(root: &Path, video: &Video) -> Result<PathBuf> {
    let dir = root.join(video.id());
    let frames_dir = dir.join(FRAMES_DIR);
    fs::create_dir_all(&frames_dir)
        .map_err(|e| Error::io(format!("creating {}", frames_dir.display()), e))?;
    for (t, frame) in video.frames().iter().enumerate() {
        write_ppm(&frames_dir.join(frame_file_name(t)), frame)?;
    }
    write_box_file(&dir.join(GROUND_TRUTH_FILE), video.ground_truth())?;
    Ok(dir)
}

pub fn write_dataset(root: &Path, videos: &[Video]) -> Result<()> {
    use rayon::prelude::*;
    fs::create_dir_all(root).map_err(|e| Error::io(format!("creating {}", root.display()), e))?;
    videos
        .par_iter()
        .map(|v| write_video(root, v).map(|_| ()))
        .collect()
}

pub fn load_video(dir: &Path) -> Result<Video> {
    let id = dir
        .file_name()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::invalid(format!("bad sequence dir {}", dir.display())))?
        .to_string();
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = read_box_file(&gt_path)?;
    let frames_dir = dir.join(FRAMES_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&frames_dir)
        .map_err(|e| Error::io(format!("listing {}", frames_dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    paths.sort();
    if paths.len() != ground_truth.len() {
        return Err(Error::Parse {
            path: gt_path,
            line: ground_truth.len(),
            message: format!(
                "{} annotations for {} frames",
                ground_truth.len(),
                paths.len()
            ),
        });
    }
    let frames = paths
        .iter()
        .map(|p| read_ppm(p).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Video::new(id, frames, ground_truth)?.with_frame_paths(paths)
}

/// Loads every sequence directory under `root`, ordered by sequence id.
pub fn load_dataset(root: &Path) -> Result<Vec<Video>> {
    use rayon::prelude::*;
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(format!("listing {}", root.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    dirs.par_iter().map(|d| load_video(d)).collect()
}

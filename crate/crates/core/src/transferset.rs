//! Transfer-set construction: keep teacher trajectories whose every frame
//! overlaps the ground truth by more than `beta`, then cut them into
//! fixed-length training chunks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Video;
use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::teachers::{stable_hash, TrajectoryTrace};

pub const DEFAULT_BETA: f64 = 0.5;
pub const CHUNK_LEN: usize = 32;
pub const CHUNKS_PER_TRAJECTORY: usize = 5;
/// Teacher id used for the union-of-teachers report row.
pub const POOL_ID: &str = "pool";

/// A teacher trajectory that passed the quality filter.
#[derive(Clone, Debug)]
pub struct KeptTrajectory {
    pub video: Video,
    pub trace: TrajectoryTrace,
    /// IoU against ground truth for frames `1..T`.
    pub ious: Vec<f64>,
}

/// Per-frame IoUs of a trace against its video's ground truth, frames `1..T`.
pub fn trajectory_ious(trace: &TrajectoryTrace, video: &Video) -> Result<Vec<f64>> {
    if trace.len() != video.len() {
        return Err(Error::invalid(format!(
            "trace {}/{} has {} boxes for {} frames",
            trace.teacher_id(),
            trace.video_id(),
            trace.len(),
            video.len()
        )));
    }
    trace.boxes()[1..]
        .iter()
        .zip(&video.ground_truth()[1..])
        .map(|(b, g)| iou(b, g))
        .collect()
}

fn check_beta(beta: f64) -> Result<()> {
    if (0.5..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(Error::invalid(format!("beta {beta} outside [0.5, 1)")))
    }
}

/// Keeps `(video, teacher)` trajectories with IoU strictly above `beta` on
/// every frame after the first. Output is sorted by video id, then teacher id.
pub fn filter_trajectories(
    traces: &[TrajectoryTrace],
    videos: &[Video],
    beta: f64,
) -> Result<Vec<KeptTrajectory>> {
    check_beta(beta)?;
    let by_id: BTreeMap<&str, &Video> = videos.iter().map(|v| (v.id(), v)).collect();
    let mut kept = traces
        .par_iter()
        .map(|trace| {
            let video = by_id.get(trace.video_id()).ok_or_else(|| {
                Error::invalid(format!("trace for unknown video `{}`", trace.video_id()))
            })?;
            let ious = trajectory_ious(trace, video)?;
            Ok(ious.iter().all(|&v| v > beta).then(|| KeptTrajectory {
                video: (*video).clone(),
                trace: trace.clone(),
                ious,
            }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    kept.sort_by(|a, b| {
        (a.trace.video_id(), a.trace.teacher_id()).cmp(&(b.trace.video_id(), b.trace.teacher_id()))
    });
    Ok(kept)
}

/// A fixed-length window of a kept trajectory.
#[derive(Clone, Debug)]
pub struct TransferChunk {
    pub video_id: String,
    pub teacher_id: String,
    pub start: usize,
    /// The window as a video: frames and ground truth share storage with the source.
    pub clip: Video,
    pub teacher_boxes: Vec<BoundingBox>,
}

impl TransferChunk {
    pub fn len(&self) -> usize {
        self.clip.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip.is_empty()
    }

    pub fn ground_truth(&self) -> &[BoundingBox] {
        self.clip.ground_truth()
    }
}

/// Start indices of `count` windows of `length`, drawn uniformly with replacement.
pub fn chunk_starts(total: usize, length: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if total < length || length == 0 {
        return Vec::new();
    }
    (0..count).map(|_| rng.random_range(0..=total - length)).collect()
}

fn chunk_rng(seed: u64, video_id: &str, teacher_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(video_id) ^ stable_hash(teacher_id).rotate_left(29))
}

/// Cuts one trajectory into `count` random windows; shorter trajectories yield none.
pub fn chunk(
    kept: &KeptTrajectory,
    length: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<TransferChunk>> {
    let trace = &kept.trace;
    let mut rng = chunk_rng(seed, trace.video_id(), trace.teacher_id());
    chunk_starts(kept.video.len(), length, count, &mut rng)
        .into_iter()
        .map(|start| {
            let id = format!("{}@{}#{}", trace.video_id(), trace.teacher_id(), start);
            Ok(TransferChunk {
                video_id: trace.video_id().to_string(),
                teacher_id: trace.teacher_id().to_string(),
                start,
                clip: kept.video.window(id, start, length)?,
                teacher_boxes: trace.boxes()[start..start + length].to_vec(),
            })
        })
        .collect()
}

pub fn chunk_all(kept: &[KeptTrajectory], length: usize, count: usize, seed: u64) -> Result<Vec<TransferChunk>> {
    let per: Vec<Vec<TransferChunk>> = kept
        .par_iter()
        .map(|k| chunk(k, length, count, seed))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// One row of the transfer-set statistics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub teacher: String,
    pub beta: f64,
    pub num_traj: usize,
    /// Mean IoU pooled over all frames of the kept trajectories.
    pub ao: f64,
    pub num_chunks: usize,
}

fn pooled_mean<'a>(series: impl Iterator<Item = &'a [f64]>) -> f64 {
    let (sum, n) = series.fold((0.0, 0usize), |(s, n), v| (s + v.iter().sum::<f64>(), n + v.len()));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Statistics for one teacher at one threshold.
pub fn stats(teacher: &str, beta: f64, kept: &[KeptTrajectory], chunks: &[TransferChunk]) -> StatsRow {
    let mine: Vec<&KeptTrajectory> = kept.iter().filter(|k| k.trace.teacher_id() == teacher).collect();
    StatsRow {
        teacher: teacher.to_string(),
        beta,
        num_traj: mine.len(),
        ao: pooled_mean(mine.iter().map(|k| k.ious.as_slice())),
        num_chunks: chunks.iter().filter(|c| c.teacher_id == teacher).count(),
    }
}

/// Union-of-teachers row: a video counts once if any teacher passed on it.
/// Its per-frame overlap is the best kept teacher's overlap on that frame.
pub fn pool_stats(beta: f64, kept: &[KeptTrajectory], length: usize, count: usize) -> StatsRow {
    let mut per_video: BTreeMap<&str, (usize, Vec<f64>)> = BTreeMap::new();
    for k in kept {
        let entry = per_video
            .entry(k.trace.video_id())
            .or_insert_with(|| (k.video.len(), vec![f64::NEG_INFINITY; k.ious.len()]));
        for (best, v) in entry.1.iter_mut().zip(&k.ious) {
            *best = best.max(*v);
        }
    }
    StatsRow {
        teacher: POOL_ID.to_string(),
        beta,
        num_traj: per_video.len(),
        ao: pooled_mean(per_video.values().map(|(_, v)| v.as_slice())),
        num_chunks: per_video
            .values()
            .filter(|(len, _)| *len >= length)
            .count()
            * count,
    }
}

/// Full report over thresholds: one row per teacher per beta, plus a pool
/// row per beta when more than one teacher is present.
pub fn transfer_report(
    traces: &[TrajectoryTrace],
    videos: &[Video],
    betas: &[f64],
    length: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<StatsRow>> {
    let mut teachers: Vec<&str> = traces.iter().map(|t| t.teacher_id()).collect();
    teachers.sort_unstable();
    teachers.dedup();
    let mut rows = Vec::new();
    for &beta in betas {
        let kept = filter_trajectories(traces, videos, beta)?;
        let chunks = chunk_all(&kept, length, count, seed)?;
        for t in &teachers {
            rows.push(stats(t, beta, &kept, &chunks));
        }
        if teachers.len() > 1 {
            rows.push(pool_stats(beta, &kept, length, count));
        }
    }
    Ok(rows)
}

pub const STATS_HEADER: &str = "teacher,beta,num_traj,ao,num_chunks";

pub fn write_stats_csv(path: &Path, rows: &[StatsRow]) -> Result<()> {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            r.teacher, r.beta, r.num_traj, r.ao, r.num_chunks
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::Frame;
    use std::sync::Arc;

    /// Video whose ground truth is the fixed box `[0,0,10,10]`.
    fn flat_video(id: &str, len: usize) -> Video {
        let f = Arc::new(Frame::filled(16, 16, [0, 0, 0]).unwrap());
        Video::new(id, vec![f; len], vec![BoundingBox::new(0.0, 0.0, 10.0, 10.0); len]).unwrap()
    }

    /// Horizontal shift that gives IoU `v` against `[0,0,10,10]`.
    fn box_with_iou(v: f64) -> BoundingBox {
        BoundingBox::new(10.0 * (1.0 - v) / (1.0 + v), 0.0, 10.0, 10.0)
    }

    fn trace_with(teacher: &str, video: &Video, ious: &[f64]) -> TrajectoryTrace {
        let mut boxes = vec![video.ground_truth()[0]];
        boxes.extend(ious.iter().map(|&v| box_with_iou(v)));
        TrajectoryTrace::new(teacher, video.id(), boxes)
    }

    #[test]
    fn filter_rule_examples() {
        let v = flat_video("v", 4);
        let keep = trace_with("a", &v, &[0.6, 0.55, 0.7]);
        let drop = trace_with("b", &v, &[0.6, 0.45, 0.7]);
        let kept = filter_trajectories(&[keep, drop], std::slice::from_ref(&v), DEFAULT_BETA).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].trace.teacher_id(), "a");
        assert_eq!(DEFAULT_BETA, 0.5);
    }

    #[test]
    fn filter_rejects_misaligned_and_bad_beta() {
        let v = flat_video("v", 4);
        let short = TrajectoryTrace::new("a", "v", vec![v.ground_truth()[0]; 3]);
        assert!(filter_trajectories(&[short], std::slice::from_ref(&v), 0.5).is_err());
        assert!(filter_trajectories(&[], std::slice::from_ref(&v), 0.4).is_err());
        assert!(filter_trajectories(&[], std::slice::from_ref(&v), 1.0).is_err());
    }

    fn kept_of(len: usize) -> KeptTrajectory {
        let v = flat_video("c", len);
        let t = trace_with("t", &v, &vec![0.9; len - 1]);
        let ious = trajectory_ious(&t, &v).unwrap();
        KeptTrajectory { video: v, trace: t, ious }
    }

    #[test]
    fn chunk_examples() {
        let exact = chunk(&kept_of(32), 32, 5, 7).unwrap();
        assert_eq!(exact.len(), 5);
        assert!(exact.iter().all(|c| c.start == 0 && c.len() == 32));
        assert!(chunk(&kept_of(31), 32, 5, 7).unwrap().is_empty());
        let long = chunk(&kept_of(100), 32, 5, 7).unwrap();
        assert_eq!(long.len(), 5);
        assert!(long.iter().all(|c| c.start <= 68 && c.teacher_boxes.len() == 32));
    }

    #[test]
    fn chunk_starts_cover_window_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let starts = chunk_starts(100, 32, 20_000, &mut rng);
        assert_eq!(*starts.iter().min().unwrap(), 0);
        assert_eq!(*starts.iter().max().unwrap(), 68);
    }

    #[test]
    fn chunking_reproducible_per_seed() {
        let k = kept_of(90);
        let a: Vec<usize> = chunk(&k, 32, 5, 3).unwrap().iter().map(|c| c.start).collect();
        let b: Vec<usize> = chunk(&k, 32, 5, 3).unwrap().iter().map(|c| c.start).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn stats_examples() {
        let empty = stats("K", 0.9, &[], &[]);
        assert_eq!((empty.num_traj, empty.ao, empty.num_chunks), (0, 0.0, 0));
        let k = kept_of(40);
        let chunks = chunk(&k, 32, 5, 1).unwrap();
        let row = stats("t", 0.5, std::slice::from_ref(&k), &chunks);
        assert_eq!(row.num_traj, 1);
        assert!((row.ao - 0.9).abs() < 1e-12);
        assert_eq!(row.num_chunks, 5 * row.num_traj);
    }

    #[test]
    fn chunk_frames_satisfy_predicate() {
        let v = flat_video("p", 50);
        let ious: Vec<f64> = (1..50).map(|i| 0.6 + 0.3 * ((i % 7) as f64 / 7.0)).collect();
        let t = trace_with("t", &v, &ious);
        let kept = filter_trajectories(&[t], std::slice::from_ref(&v), 0.55).unwrap();
        for c in chunk_all(&kept, 32, 5, 2).unwrap() {
            for (b, g) in c.teacher_boxes.iter().zip(c.ground_truth()) {
                assert!(iou(b, g).unwrap() > 0.55);
            }
        }
    }

    #[test]
    fn pool_row_counts_videos_once() {
        let v = flat_video("v", 40);
        let a = trace_with("a", &v, &vec![0.8; 39]);
        let b = trace_with("b", &v, &vec![0.9; 39]);
        let rows = transfer_report(&[a, b], std::slice::from_ref(&v), &[0.5], CHUNK_LEN, CHUNKS_PER_TRAJECTORY, 0).unwrap();
        assert_eq!(rows.len(), 3);
        let pool = rows.iter().find(|r| r.teacher == POOL_ID).unwrap();
        assert_eq!(pool.num_traj, 1);
        assert!((pool.ao - 0.9).abs() < 1e-12);
        assert_eq!(pool.num_chunks, 5);
    }

    #[test]
    fn stats_csv_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_stats_csv(&p, &[stats("K", 0.9, &[], &[])]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "teacher,beta,num_traj,ao,num_chunks\nK,0.9,0,0.000000,0\n");
    }
}

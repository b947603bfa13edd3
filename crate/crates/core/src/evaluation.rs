//! One-pass evaluation and the overlap / center-error metrics.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::Video;
use crate::error::{Error, Result};
use crate::tracking::Tracker;

/// Overlap thresholds of the success plot: 0.00, 0.01, …, 1.00.
pub const SUCCESS_POINTS: usize = 101;
/// Pixel thresholds of the precision plot: 0, 1, …, 50.
pub const PRECISION_POINTS: usize = 51;
pub const PRECISION_REPORT_PX: f64 = 20.0;

pub fn success_threshold(i: usize) -> f64 {
    i as f64 / (SUCCESS_POINTS - 1) as f64
}

fn non_empty(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        Err(Error::invalid(format!("{what} of an empty sequence")))
    } else {
        Ok(())
    }
}

/// Average overlap.
pub fn ao(ious: &[f64]) -> Result<f64> {
    non_empty(ious, "AO")?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Fraction of frames with IoU at or above `thr`.
pub fn sr(ious: &[f64], thr: f64) -> Result<f64> {
    non_empty(ious, "SR")?;
    Ok(ious.iter().filter(|&&v| v >= thr).count() as f64 / ious.len() as f64)
}

pub fn success_curve(ious: &[f64]) -> Result<Vec<(f64, f64)>> {
    non_empty(ious, "success curve")?;
    (0..SUCCESS_POINTS)
        .map(|i| {
            let thr = success_threshold(i);
            Ok((thr, sr(ious, thr)?))
        })
        .collect()
}

/// Area under the success plot: the mean success rate over the grid.
pub fn success_auc(ious: &[f64]) -> Result<f64> {
    let c = success_curve(ious)?;
    Ok(c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64)
}

/// Fraction of frames whose center error is at most `px`.
pub fn precision_at(center_errors: &[f64], px: f64) -> Result<f64> {
    non_empty(center_errors, "precision")?;
    Ok(center_errors.iter().filter(|&&e| e <= px).count() as f64 / center_errors.len() as f64)
}

pub fn precision_curve(center_errors: &[f64]) -> Result<Vec<(f64, f64)>> {
    (0..PRECISION_POINTS)
        .map(|px| Ok((px as f64, precision_at(center_errors, px as f64)?)))
        .collect()
}

/// Area under the precision plot: the mean precision over 0..=50 px.
pub fn precision_auc(center_errors: &[f64]) -> Result<f64> {
    let c = precision_curve(center_errors)?;
    Ok(c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub ss: f64,
    pub ps: f64,
    pub precision20: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoResult {
    pub video_id: String,
    pub ious: Vec<f64>,
    pub center_errors: Vec<f64>,
}

impl VideoResult {
    pub fn metrics(&self) -> Result<Metrics> {
        Ok(Metrics {
            ao: ao(&self.ious)?,
            sr50: sr(&self.ious, 0.5)?,
            sr75: sr(&self.ious, 0.75)?,
            ss: success_auc(&self.ious)?,
            ps: precision_auc(&self.center_errors)?,
            precision20: precision_at(&self.center_errors, PRECISION_REPORT_PX)?,
        })
    }
}

/// Dataset score: every metric averaged over videos.
pub fn aggregate(videos: &[VideoResult]) -> Result<Metrics> {
    if videos.is_empty() {
        return Err(Error::invalid("no evaluated videos"));
    }
    let per: Vec<Metrics> = videos.iter().map(|v| v.metrics()).collect::<Result<_>>()?;
    let mean = |f: fn(&Metrics) -> f64| per.iter().map(f).sum::<f64>() / per.len() as f64;
    Ok(Metrics {
        ao: mean(|m| m.ao),
        sr50: mean(|m| m.sr50),
        sr75: mean(|m| m.sr75),
        ss: mean(|m| m.ss),
        ps: mean(|m| m.ps),
        precision20: mean(|m| m.precision20),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub tracker: String,
    pub dataset: String,
    pub videos: Vec<VideoResult>,
    /// Videos excluded because the tracker aborted, with the reason.
    pub failed: Vec<(String, String)>,
    pub aggregate: Metrics,
}

impl EvalResult {
    pub fn from_videos(tracker: &str, dataset: &str, videos: Vec<VideoResult>, failed: Vec<(String, String)>) -> Result<Self> {
        Ok(Self {
            tracker: tracker.to_string(),
            dataset: dataset.to_string(),
            aggregate: aggregate(&videos)?,
            videos,
            failed,
        })
    }

    /// Success curve averaged over videos.
    pub fn success_curve(&self) -> Result<Vec<(f64, f64)>> {
        mean_curves(self.videos.iter().map(|v| success_curve(&v.ious)))
    }

    pub fn precision_curve(&self) -> Result<Vec<(f64, f64)>> {
        mean_curves(self.videos.iter().map(|v| precision_curve(&v.center_errors)))
    }
}

fn mean_curves(curves: impl Iterator<Item = Result<Vec<(f64, f64)>>>) -> Result<Vec<(f64, f64)>> {
    let curves: Vec<Vec<(f64, f64)>> = curves.collect::<Result<_>>()?;
    let first = curves.first().ok_or_else(|| Error::invalid("no curves"))?;
    Ok((0..first.len())
        .map(|i| {
            let y = curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64;
            (first[i].0, y)
        })
        .collect())
}

/// Runs `tracker` once per video from its first ground-truth box. Videos on
/// which the tracker aborts are excluded with a warning.
pub fn ope_run(tracker: &dyn Tracker, dataset: &str, videos: &[Video]) -> Result<EvalResult> {
    if videos.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let outcomes: Vec<Result<std::result::Result<VideoResult, String>>> = videos
        .par_iter()
        .map(|v| {
            let run = tracker.track(v)?;
            if let Some(reason) = run.failure.clone() {
                return Ok(Err(reason));
            }
            if !run.is_complete(v) {
                return Ok(Err(format!("{} of {} frames tracked", run.frames.len(), v.len() - 1)));
            }
            Ok(Ok(VideoResult {
                video_id: v.id().to_string(),
                ious: run.ious(v),
                center_errors: run.center_errors(v),
            }))
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (v, outcome) in videos.iter().zip(outcomes) {
        match outcome? {
            Ok(r) => ok.push(r),
            Err(reason) => {
                log::warn!("{} aborted on `{}`: {reason}; excluded", tracker.id(), v.id());
                failed.push((v.id().to_string(), reason));
            }
        }
    }
    ok.sort_by(|a, b| a.video_id.cmp(&b.video_id));
    EvalResult::from_videos(tracker.id(), dataset, ok, failed)
}

pub const SUMMARY_HEADER: &str = "tracker,dataset,ao,sr50,sr75,ss,ps";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn curve_csv(points: &[(f64, f64)]) -> String {
    let mut s = String::from("threshold,value\n");
    for (x, y) in points {
        s.push_str(&format!("{x},{y}\n"));
    }
    s
}

#[derive(Serialize)]
struct VideoReport<'a> {
    video_id: &'a str,
    metrics: Metrics,
    ious: &'a [f64],
    center_errors: &'a [f64],
}

#[derive(Serialize)]
struct DetailReport<'a> {
    tracker: &'a str,
    dataset: &'a str,
    aggregate: Metrics,
    videos: Vec<VideoReport<'a>>,
    failed: &'a [(String, String)],
}

/// Writes `summary.csv` plus, per result, `<tracker>_<dataset>.json`,
/// `<tracker>_<dataset>_success.csv` and `<tracker>_<dataset>_precision.csv`.
pub fn report(results: &[EvalResult], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for r in results {
        let m = r.aggregate;
        summary.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.tracker, r.dataset, m.ao, m.sr50, m.sr75, m.ss, m.ps
        ));
        let stem = format!("{}_{}", r.tracker, r.dataset);
        let detail = DetailReport {
            tracker: &r.tracker,
            dataset: &r.dataset,
            aggregate: r.aggregate,
            videos: r
                .videos
                .iter()
                .map(|v| {
                    Ok(VideoReport {
                        video_id: &v.video_id,
                        metrics: v.metrics()?,
                        ious: &v.ious,
                        center_errors: &v.center_errors,
                    })
                })
                .collect::<Result<_>>()?,
            failed: &r.failed,
        };
        let json = serde_json::to_string_pretty(&detail).map_err(|e| Error::invalid(e.to_string()))?;
        write_file(&dir.join(format!("{stem}.json")), &json)?;
        write_file(&dir.join(format!("{stem}_success.csv")), &curve_csv(&r.success_curve()?))?;
        write_file(&dir.join(format!("{stem}_precision.csv")), &curve_csv(&r.precision_curve()?))?;
    }
    write_file(&dir.join("summary.csv"), &summary)
}

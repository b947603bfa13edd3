use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use distrack_core::environment::{generate_dataset, load_dataset, write_dataset, Video};
use distrack_core::evaluation::{ope_run, report};
use distrack_core::learning::{build_sequences, check_student_gradients, train, write_training_log, GRAD_CHECK_TOLERANCE};
use distrack_core::student::{load, save, Architecture, ModelParameters};
use distrack_core::teachers::{run_teacher, Teacher, TraceTeacher, TrajectoryTrace};
use distrack_core::tracking::{
    TeacherTracker, TrackRun, Tracker, TrasTracker, TrasfustTracker, TrastTracker,
};
use distrack_core::transferset::{
    chunk_all, filter_trajectories, transfer_report, write_stats_csv, KeptTrajectory, TransferChunk,
};
use distrack_core::{Error, Result};

use crate::config::Config;

pub const CHUNK_INDEX: &str = "chunks.csv";
pub const CHUNK_INDEX_HEADER: &str = "video,teacher,start,length";

/// Failure of a command, classified by exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
    /// A numeric check ran to completion and did not pass.
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(format!("configuration error: {m}")),
            e => Failure::Core(e),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::NonFinite { .. }) => 3,
            Failure::Core(_) => 2,
            Failure::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> String {
        let m = match self {
            Failure::Usage(m) | Failure::Verification(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        };
        m.replace('\n', " ")
    }
}

pub type CmdResult<T = ()> = std::result::Result<T, Failure>;

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Core(Error::Io {
        context: path.display().to_string(),
        source: e,
    })
}

fn write(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| io(path, e))
}

pub fn require_seed(flag: Option<u64>, configured: Option<u64>, command: &str) -> CmdResult<u64> {
    flag.or(configured)
        .ok_or_else(|| Failure::Usage(format!("{command} needs a seed (--seed or the config file)")))
}

pub fn gen_data(cfg: &Config, out: &Path) -> CmdResult {
    let seed = cfg.env.seed.expect("seed resolved by caller");
    let spec = cfg.env.synthetic();
    spec.validate()?;
    let videos = generate_dataset(&spec, seed, cfg.env.videos, &cfg.env.prefix)?;
    write_dataset(out, &videos)?;
    log::info!("wrote {} videos to {}", videos.len(), out.display());
    Ok(())
}

fn load_videos(dir: &Path) -> CmdResult<Vec<Video>> {
    let videos = load_dataset(dir)?;
    if videos.is_empty() {
        return Err(Failure::Core(Error::InvalidInput(format!("no videos under {}", dir.display()))));
    }
    Ok(videos)
}

/// Runs every configured teacher over every video; failed runs are skipped with a warning.
pub fn run_teachers(cfg: &Config, data: &Path, out: &Path) -> CmdResult {
    let videos = load_videos(data)?;
    let teachers = cfg.teachers.build()?;
    if teachers.is_empty() {
        return Err(Failure::Usage("no teachers configured".into()));
    }
    for t in &teachers {
        let results: Vec<Result<TrajectoryTrace>> = videos.par_iter().map(|v| run_teacher(t.as_ref(), v)).collect();
        let mut ok = 0;
        for (v, r) in videos.iter().zip(results) {
            match r {
                Ok(trace) => {
                    trace.save(out)?;
                    ok += 1;
                }
                Err(e) => log::warn!("teacher `{}` on `{}`: {e}", t.id(), v.id()),
            }
        }
        log::info!("teacher `{}`: {ok}/{} videos", t.id(), videos.len());
    }
    Ok(())
}

/// Teacher ids with a trace directory under `traces`.
fn trace_teachers(traces: &Path) -> CmdResult<Vec<String>> {
    let mut ids: Vec<String> = std::fs::read_dir(traces)
        .map_err(|e| io(traces, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().to_str().map(String::from))
        .collect();
    ids.sort();
    Ok(ids)
}

fn load_traces(traces: &Path, videos: &[Video]) -> CmdResult<Vec<TrajectoryTrace>> {
    let mut out = Vec::new();
    for id in trace_teachers(traces)? {
        for v in videos {
            if TrajectoryTrace::path_in(traces, &id, v.id()).exists() {
                out.push(TrajectoryTrace::load(traces, &id, v.id())?);
            }
        }
    }
    if out.is_empty() {
        return Err(Failure::Core(Error::InvalidInput(format!("no traces under {}", traces.display()))));
    }
    Ok(out)
}

pub fn filter(cfg: &Config, data: &Path, traces: &Path, out: &Path) -> CmdResult {
    let seed = cfg.train.seed.unwrap_or(0);
    let videos = load_videos(data)?;
    let traces = load_traces(traces, &videos)?;
    let kept = filter_trajectories(&traces, &videos, cfg.train.beta)?;
    let chunks = chunk_all(&kept, cfg.train.chunk_len, cfg.train.chunks_per_trajectory, seed)?;
    let mut index = format!("{CHUNK_INDEX_HEADER}\n");
    for c in &chunks {
        let _ = writeln!(index, "{},{},{},{}", c.video_id, c.teacher_id, c.start, c.len());
    }
    write(&out.join(CHUNK_INDEX), &index)?;
    let rows = transfer_report(
        &traces,
        &videos,
        &[cfg.train.beta],
        cfg.train.chunk_len,
        cfg.train.chunks_per_trajectory,
        seed,
    )?;
    write_stats_csv(&out.join("stats.csv"), &rows)?;
    log::info!("kept {} trajectories, {} chunks", kept.len(), chunks.len());
    Ok(())
}

fn parse_index(path: &Path) -> CmdResult<Vec<(String, String, usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| {
            Failure::Core(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: m.to_string(),
            })
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected video,teacher,start,length"));
        }
        let start = f[2].parse().map_err(|_| bad("bad start"))?;
        let len = f[3].parse().map_err(|_| bad("bad length"))?;
        rows.push((f[0].to_string(), f[1].to_string(), start, len));
    }
    Ok(rows)
}

fn chunks_from_index(
    rows: &[(String, String, usize, usize)],
    kept: &[KeptTrajectory],
) -> CmdResult<Vec<TransferChunk>> {
    rows.iter()
        .map(|(video, teacher, start, len)| {
            let k = kept
                .iter()
                .find(|k| k.trace.video_id() == video && k.trace.teacher_id() == teacher)
                .ok_or_else(|| {
                    Failure::Core(Error::InvalidInput(format!(
                        "chunk of `{video}` by `{teacher}` is not in the transfer set at this beta"
                    )))
                })?;
            let id = format!("{video}@{teacher}#{start}");
            let end = start + len;
            if end > k.video.len() {
                return Err(Failure::Core(Error::InvalidInput(format!("chunk {id} runs past the video"))));
            }
            Ok(TransferChunk {
                video_id: video.clone(),
                teacher_id: teacher.clone(),
                start: *start,
                clip: k.video.window(id, *start, *len)?,
                teacher_boxes: k.trace.boxes()[*start..end].to_vec(),
            })
        })
        .collect()
}

pub fn architecture(cfg: &Config) -> CmdResult<Arc<Architecture>> {
    Ok(Architecture::new(cfg.model.clone())?)
}

pub struct TrainPaths<'a> {
    pub data: &'a Path,
    pub traces: &'a Path,
    pub transfer: &'a Path,
    pub validation: Option<&'a Path>,
}

pub fn train_cmd(cfg: &Config, paths: &TrainPaths<'_>, out: &Path) -> CmdResult {
    let seed = cfg.train.seed.expect("seed resolved by caller");
    let videos = load_videos(paths.data)?;
    let traces = load_traces(paths.traces, &videos)?;
    let kept = filter_trajectories(&traces, &videos, cfg.train.beta)?;
    let rows = parse_index(&paths.transfer.join(CHUNK_INDEX))?;
    let chunks = chunks_from_index(&rows, &kept)?;
    let sequences = build_sequences(&kept, &chunks);
    let validation = match paths.validation {
        Some(d) => load_videos(d)?,
        None => Vec::new(),
    };
    let arch = architecture(cfg)?;
    let init = ModelParameters::init(&arch, seed);
    let outcome = train(&init, &sequences, &validation, cfg.crop(), &cfg.train.train_config(seed))?;
    save(&outcome.final_params, &out.join("student.ckpt"))?;
    save(&outcome.best_params, &out.join("best.ckpt"))?;
    write_training_log(&out.join("train_log.jsonl"), &outcome.log)?;
    let mut val = String::from("update,ao\n");
    for (u, ao) in &outcome.validation {
        let _ = writeln!(val, "{u},{ao}");
    }
    write(&out.join("validation.csv"), &val)?;
    let mut cur = String::from("sequence,T_hat\n");
    for (s, c) in sequences.iter().zip(&outcome.curriculum) {
        let _ = writeln!(cur, "{},{}", s.id, c.terminal);
    }
    write(&out.join("curriculum.csv"), &cur)?;
    if let Some(deltas) = &outcome.deltas {
        let mut bytes = Vec::with_capacity(deltas.len() * arch.num_params() * 8);
        for d in deltas {
            for v in d {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let p = out.join("deltas.bin");
        std::fs::write(&p, bytes).map_err(|e| io(&p, e))?;
    }
    log::info!("{} updates", outcome.updates);
    Ok(())
}

/// Resolves a teacher id: a recorded trace when `traces` is given, otherwise a configured live teacher.
fn resolve_teacher(cfg: &Config, id: &str, traces: Option<&Path>) -> CmdResult<Arc<dyn Teacher>> {
    if let Some(dir) = traces {
        if !dir.join(id).is_dir() {
            return Err(Failure::Usage(format!("no traces for teacher `{id}` in {}", dir.display())));
        }
        return Ok(Arc::new(TraceTeacher::from_dir(id, dir)));
    }
    cfg.teachers
        .build()?
        .into_iter()
        .find(|t| t.id() == id)
        .ok_or_else(|| Failure::Usage(format!("unknown teacher `{id}`")))
}

pub struct TrackerSpec<'a> {
    pub checkpoint: Option<&'a Path>,
    pub teacher: Option<&'a str>,
    pub pool: &'a [String],
    pub traces: Option<&'a Path>,
}

fn student(cfg: &Config, spec: &TrackerSpec<'_>) -> CmdResult<ModelParameters> {
    let path = spec
        .checkpoint
        .ok_or_else(|| Failure::Usage("--checkpoint is required for student trackers".into()))?;
    Ok(load(path, &architecture(cfg)?)?)
}

pub fn build_tracker(cfg: &Config, mode: &str, spec: &TrackerSpec<'_>) -> CmdResult<Box<dyn Tracker>> {
    let crop = cfg.crop();
    let evaluator = cfg.eval.evaluator();
    let need_teacher = || {
        spec.teacher
            .ok_or_else(|| Failure::Usage(format!("mode `{mode}` needs --teacher")))
    };
    Ok(match mode {
        "tras" => Box::new(TrasTracker {
            id: "tras".into(),
            params: student(cfg, spec)?,
            crop,
        }),
        "trast" => {
            let teacher = resolve_teacher(cfg, need_teacher()?, spec.traces)?;
            Box::new(TrastTracker {
                id: format!("trast-{}", teacher.id()),
                params: student(cfg, spec)?,
                crop,
                teacher,
                evaluator,
            })
        }
        "trasfust" => {
            if spec.pool.is_empty() {
                return Err(Failure::Usage("trasfust needs --pool".into()));
            }
            let pool = spec
                .pool
                .iter()
                .map(|id| resolve_teacher(cfg, id, spec.traces))
                .collect::<CmdResult<Vec<_>>>()?;
            Box::new(TrasfustTracker {
                id: "trasfust".into(),
                params: student(cfg, spec)?,
                crop,
                pool,
                evaluator,
            })
        }
        "teacher" => Box::new(TeacherTracker(resolve_teacher(cfg, need_teacher()?, spec.traces)?)),
        other => return Err(Failure::Usage(format!("unknown mode `{other}` (tras, trast, trasfust, teacher)"))),
    })
}

/// Runs a tracker over a dataset and writes one CSV per video.
pub fn track(tracker: &dyn Tracker, data: &Path, out: &Path) -> CmdResult {
    let videos = load_videos(data)?;
    let runs: Vec<Result<TrackRun>> = videos.par_iter().map(|v| tracker.track(v)).collect();
    let mut failed = Vec::new();
    for run in runs {
        let run = run?;
        run.write_csv(&out.join(format!("{}.csv", run.video_id)))?;
        if let Some(reason) = &run.failure {
            failed.push(format!("{}: {reason}", run.video_id));
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Core(Error::Teacher {
            teacher: tracker.id().to_string(),
            message: failed.join("; "),
        }))
    }
}

pub fn eval(cfg: &Config, modes: &[String], spec: &TrackerSpec<'_>, data: &Path, out: &Path) -> CmdResult {
    let videos = load_videos(data)?;
    let mut results = Vec::new();
    let mut seen = BTreeSet::new();
    for mode in modes {
        let tracker = build_tracker(cfg, mode, spec)?;
        if !seen.insert(tracker.id().to_string()) {
            continue;
        }
        results.push(ope_run(tracker.as_ref(), &cfg.eval.dataset, &videos)?);
    }
    report(&results, out)?;
    Ok(())
}

#[derive(Serialize)]
struct GradCheckEntry {
    loss: &'static str,
    max_rel_error: f64,
    worst_coordinate: Option<String>,
    checked: usize,
    kinked: usize,
    passed: bool,
}

pub fn gradcheck(cfg: &Config, seed: u64, samples: usize, out: &Path) -> CmdResult {
    let checks = check_student_gradients(&cfg.model, seed, samples)?;
    let entries: Vec<GradCheckEntry> = checks
        .iter()
        .map(|c| GradCheckEntry {
            loss: c.loss,
            max_rel_error: c.report.max_rel_error,
            worst_coordinate: c.report.argmax.clone(),
            checked: c.report.checked,
            kinked: c.report.kinked,
            passed: c.passed(),
        })
        .collect();
    let mut doc = BTreeMap::new();
    doc.insert("tolerance", serde_json::json!(GRAD_CHECK_TOLERANCE));
    doc.insert("checks", serde_json::json!(entries));
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Failure::Core(Error::InvalidInput(e.to_string())))?;
    write(&out.join("gradcheck.json"), &text)?;
    for e in &entries {
        println!("{:<9} max rel error {:.3e} ({} coordinates)", e.loss, e.max_rel_error, e.checked);
    }
    match entries.iter().find(|e| !e.passed) {
        None => Ok(()),
        Some(e) => Err(Failure::Verification(format!(
            "gradient check failed for {} loss: {:.3e} >= {GRAD_CHECK_TOLERANCE:e}",
            e.loss, e.max_rel_error
        ))),
    }
}

/// Moves a failed command's outputs aside to `<out>.failed`.
pub fn quarantine(out: &Path) -> Option<PathBuf> {
    if !out.exists() {
        return None;
    }
    let mut name = out.file_name()?.to_os_string();
    name.push(".failed");
    let target = out.with_file_name(name);
    if target.exists() {
        let _ = std::fs::remove_dir_all(&target);
    }
    std::fs::rename(out, &target).ok().map(|_| target)
}

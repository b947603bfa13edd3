//! Offline training: distilling and autonomous workers write gradients into
//! one shared parameter store while a per-sequence curriculum grows the
//! episode horizon.

mod curriculum;
mod losses;
mod optimizer;
mod verify;

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use curriculum::{curriculum_update, CurriculumState, DEFAULT_TAU};
pub use losses::{
    actor_critic_loss, advantages, distill_loss, exploration_sigma, log_density, mask, returns, sample_action,
    ActorCriticLoss, Combined, DistillLoss, EpisodeRecord, PolicyPart, ReturnsMode, SampledAction, StepRecord, ValuePart,
    SIGMA_FLOOR,
};
pub use verify::{check_student_gradients, LossCheck, GRAD_CHECK_TOLERANCE};
pub use optimizer::{
    replay_deltas, Applied, Optimizer, OptimizerConfig, OptimizerKind, SharedWeights, UpdateHook, UpdateKind,
};

use crate::environment::{reward, CropConfig, TrackingMdp, Video};
use crate::error::{Error, Result};
use crate::geometry::{apply_action, infer_action, BoundingBox};
use crate::student::{backward, forward, forward_taped, Architecture, HiddenState, ModelParameters, WindowLoss};
use crate::teachers::{best_teacher, teacher_action};
use crate::transferset::{KeptTrajectory, TransferChunk};

/// A training clip with the aligned predictions of every usable teacher.
#[derive(Clone, Debug)]
pub struct TrainingSequence {
    pub id: String,
    pub clip: Video,
    /// One box track per teacher, each as long as the clip.
    pub teachers: Vec<Vec<BoundingBox>>,
}

impl TrainingSequence {
    pub fn validate(&self) -> Result<()> {
        if self.teachers.is_empty() {
            return Err(Error::invalid(format!("sequence `{}` has no teacher", self.id)));
        }
        if self.teachers.iter().any(|t| t.len() != self.clip.len()) {
            return Err(Error::invalid(format!("sequence `{}` has misaligned teacher boxes", self.id)));
        }
        Ok(())
    }
}

/// Turns chunks into training sequences. Each chunk window carries every
/// kept trajectory of its video, so the best teacher can be chosen per frame.
pub fn build_sequences(kept: &[KeptTrajectory], chunks: &[TransferChunk]) -> Vec<TrainingSequence> {
    chunks
        .iter()
        .map(|c| {
            let range = c.start..c.start + c.len();
            let teachers = kept
                .iter()
                .filter(|k| k.trace.video_id() == c.video_id)
                .map(|k| k.trace.boxes()[range.clone()].to_vec())
                .collect();
            TrainingSequence {
                id: c.clip.id().to_string(),
                clip: c.clip.clone(),
                teachers,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of workers; half distill, half learn autonomously.
    pub workers: usize,
    pub t_max: usize,
    pub gamma: f64,
    pub returns: ReturnsMode,
    pub max_updates: u64,
    /// Validation runs every this many updates.
    pub validate_every: u64,
    /// Validation rounds without improvement before stopping.
    pub patience: usize,
    /// Starting episode horizon `T̂` for every sequence.
    pub initial_horizon: usize,
    pub tau: f64,
    pub seed: u64,
    pub record_deltas: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            workers: 8,
            t_max: 5,
            gamma: 1.0,
            returns: ReturnsMode::Forward,
            max_updates: 50_000,
            validate_every: 1_000,
            patience: 5,
            initial_horizon: 5,
            tau: DEFAULT_TAU,
            seed: 0,
            record_deltas: false,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.workers < 2 {
            return bad("at least two workers are needed (one distilling, one autonomous)");
        }
        if self.t_max == 0 {
            return bad("t_max must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.validate_every == 0 || self.patience == 0 {
            return bad("validate_every and patience must be positive");
        }
        if self.initial_horizon == 0 {
            return bad("initial_horizon must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        self.optimizer.validate()
    }

    /// Worker `i` distills when `i` is even.
    pub fn worker_kind(i: usize) -> UpdateKind {
        if i.is_multiple_of(2) {
            UpdateKind::Distill
        } else {
            UpdateKind::Autonomous
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub update: u64,
    pub worker: usize,
    pub kind: UpdateKind,
    pub loss: f64,
    pub sum_reward: f64,
    pub video_id: String,
    #[serde(rename = "T_hat")]
    pub t_hat: usize,
}

pub fn write_training_log(path: &Path, log: &[LogEntry]) -> Result<()> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::invalid(e.to_string()))?);
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Steps (1-based) after which a gradient is sent in an episode ending at `terminal`.
pub fn window_ends(terminal: usize, t_max: usize) -> Vec<usize> {
    (1..=terminal).filter(|t| t % t_max == 0 || *t == terminal).collect()
}

/// Everything a worker reads or writes besides its own state.
pub struct WorkerContext<'a> {
    pub arch: &'a Arc<Architecture>,
    pub sequences: &'a [TrainingSequence],
    pub shared: &'a SharedWeights,
    pub curriculum: &'a Mutex<Vec<CurriculumState>>,
    pub log: &'a Mutex<Vec<LogEntry>>,
    pub crop: CropConfig,
    pub config: &'a TrainConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WorkerSummary {
    pub episodes: usize,
    pub sends: usize,
}

const MAX_REJECTED_IN_A_ROW: usize = 100;

struct Worker<'a, 'b> {
    ctx: &'b WorkerContext<'a>,
    kind: UpdateKind,
    id: usize,
    rng: ChaCha8Rng,
    rejected: usize,
    summary: WorkerSummary,
}

enum EpisodeEnd {
    Finished,
    StoreClosed,
}

impl Worker<'_, '_> {
    fn send(&mut self, grad: &[f64], entry: LogEntry) -> Result<bool> {
        match self.ctx.shared.apply(grad, self.kind) {
            Ok(Applied::Accepted(n)) => {
                self.rejected = 0;
                self.summary.sends += 1;
                let mut log = self.ctx.log.lock().unwrap_or_else(|e| e.into_inner());
                log.push(LogEntry { update: n, ..entry });
                Ok(true)
            }
            Ok(Applied::Closed) => Ok(false),
            Err(Error::NonFinite { step, what }) => {
                log::warn!("worker {} update rejected: non-finite {what} at {step}", self.id);
                self.rejected += 1;
                if self.rejected >= MAX_REJECTED_IN_A_ROW {
                    return Err(Error::NonFinite { step, what });
                }
                Ok(true)
            }
            Err(e) => Err(e),
        }
    }

    fn episode(&mut self, j: usize) -> Result<EpisodeEnd> {
        let ctx = self.ctx;
        let seq = &ctx.sequences[j];
        let terminal = ctx.curriculum.lock().unwrap_or_else(|e| e.into_inner())[j].terminal;
        let theta = ctx.shared.snapshot();
        let params = ModelParameters::from_values(ctx.arch, theta.to_vec())?;
        let cfg = ctx.config;
        let mut mdp = TrackingMdp::new(&seq.clip, terminal, ctx.crop)?;
        let mut hidden = HiddenState::zeros(ctx.arch.hidden_size());
        let mut state = mdp.current_state()?;
        let (mut sum_student, mut sum_teacher) = (0.0, 0.0);

        while !mdp.is_done() {
            let mut record = EpisodeRecord::default();
            let mut tapes = Vec::with_capacity(cfg.t_max);
            while record.steps.len() < cfg.t_max && !mdp.is_done() {
                let (out, next_hidden, tape) = forward_taped(&params, &state, &hidden)?;
                let t = mdp.t();
                let b_prev = mdp.b_prev();
                let g = seq.clip.ground_truth()[t];
                let candidates: Vec<BoundingBox> = seq.teachers.iter().map(|tr| tr[t]).collect();
                let best = best_teacher(&candidates, &g)?;
                let a_teacher = teacher_action(&candidates[best], &b_prev);
                let r_teacher = reward(&apply_action(&a_teacher, &b_prev), &g);
                let gt_action = infer_action(&g, &b_prev);
                let mu = out.action;
                let (executed, sample, sigma, log_density) = match self.kind {
                    UpdateKind::Distill => (mu, mu.to_array(), [1.0; 4], 0.0),
                    UpdateKind::Autonomous => {
                        let (s, ld) = sample_action(&mu, &gt_action, &mut self.rng);
                        (s.executed, s.sample, s.sigma, ld)
                    }
                };
                let tr = mdp.step(&executed)?;
                record.steps.push(StepRecord {
                    mu,
                    executed,
                    sample,
                    sigma,
                    log_density,
                    reward: tr.reward,
                    value: out.value,
                    teacher_action: a_teacher,
                    teacher_reward: r_teacher,
                    mask: mask(tr.reward, r_teacher),
                    gt_action,
                });
                tapes.push(tape);
                hidden = next_hidden;
                if let Some(next) = tr.next_state {
                    state = next;
                }
            }
            record.terminated = mdp.is_done();
            if !record.terminated {
                record.bootstrap = forward(&params, &state, &hidden)?.0.value;
            }
            sum_student += record.sum_reward();
            sum_teacher += record.sum_teacher_reward();

            let (loss, eval) = match self.kind {
                UpdateKind::Distill => {
                    let l = DistillLoss::from_record(&record);
                    (distill_loss(&record), l.evaluate_outputs(&record))
                }
                UpdateKind::Autonomous => {
                    let l = ActorCriticLoss::from_record(&record, cfg.gamma, cfg.returns)?;
                    let (pi, v) = actor_critic_loss(&record, cfg.gamma, cfg.returns)?;
                    (pi + v, l.evaluate_outputs(&record))
                }
            };
            if let Some(step) = eval.per_step.iter().position(|v| !v.is_finite()) {
                log::warn!("worker {} skipped a window with non-finite loss at step {step}", self.id);
                continue;
            }
            let grad = backward(&params, &tapes, &eval.grads)?;
            let entry = LogEntry {
                update: 0,
                worker: self.id,
                kind: self.kind,
                loss,
                sum_reward: record.sum_reward(),
                video_id: seq.id.clone(),
                t_hat: terminal,
            };
            if !self.send(&grad, entry)? {
                return Ok(EpisodeEnd::StoreClosed);
            }
        }
        // Distilling workers follow the mean policy, so their episodes are the
        // ones that measure the student against the teachers.
        if self.kind == UpdateKind::Distill {
            let mut cur = ctx.curriculum.lock().unwrap_or_else(|e| e.into_inner());
            curriculum_update(&mut cur[j], sum_student, sum_teacher, cfg.tau);
        }
        Ok(EpisodeEnd::Finished)
    }
}

/// Evaluates a window loss on the outputs the record was produced with.
trait RecordedOutputs {
    fn evaluate_outputs(&self, record: &EpisodeRecord) -> crate::student::LossEval;
}

impl<L: WindowLoss> RecordedOutputs for L {
    fn evaluate_outputs(&self, record: &EpisodeRecord) -> crate::student::LossEval {
        let outs: Vec<crate::student::StudentOutput> = record
            .steps
            .iter()
            .map(|s| crate::student::StudentOutput {
                action: s.mu,
                value: s.value,
            })
            .collect();
        self.evaluate(&outs)
    }
}

/// Runs one worker until the shared store closes or `max_episodes` is reached.
pub fn run_worker(
    ctx: &WorkerContext<'_>,
    kind: UpdateKind,
    id: usize,
    seed: u64,
    max_episodes: Option<usize>,
) -> Result<WorkerSummary> {
    let mut w = Worker {
        ctx,
        kind,
        id,
        rng: ChaCha8Rng::seed_from_u64(seed),
        rejected: 0,
        summary: WorkerSummary::default(),
    };
    if ctx.sequences.is_empty() {
        return Ok(w.summary);
    }
    while !ctx.shared.is_closed() && max_episodes.is_none_or(|m| w.summary.episodes < m) {
        let j = w.rng.random_range(0..ctx.sequences.len());
        let end = w.episode(j)?;
        w.summary.episodes += 1;
        if let EpisodeEnd::StoreClosed = end {
            break;
        }
    }
    Ok(w.summary)
}

/// Validation record shared between the update hook and the trainer.
#[derive(Clone, Debug, Default)]
pub struct ValidationLog {
    pub history: Vec<(u64, f64)>,
    pub best: Option<(u64, f64, Arc<Vec<f64>>)>,
    stale: usize,
}

struct ValidationHook {
    arch: Arc<Architecture>,
    crop: CropConfig,
    videos: Vec<Video>,
    every: u64,
    patience: usize,
    log: Arc<Mutex<ValidationLog>>,
}

/// Mean per-video AO of the autonomous tracker; failed videos score 0.
pub fn validation_ao(params: &ModelParameters, videos: &[Video], crop: &CropConfig) -> f64 {
    if videos.is_empty() {
        return 0.0;
    }
    let total: f64 = videos
        .iter()
        .map(|v| match crate::tracking::tras(v, params, crop) {
            Ok(run) => crate::evaluation::ao(&run.ious(v)).unwrap_or(0.0),
            Err(e) => {
                log::warn!("validation on `{}` failed: {e}", v.id());
                0.0
            }
        })
        .sum();
    total / videos.len() as f64
}

impl UpdateHook for ValidationHook {
    fn after_update(&mut self, update: u64, theta: &Arc<Vec<f64>>) -> bool {
        if !update.is_multiple_of(self.every) {
            return false;
        }
        let ao = match ModelParameters::from_values(&self.arch, theta.to_vec()) {
            Ok(p) => validation_ao(&p, &self.videos, &self.crop),
            Err(_) => 0.0,
        };
        log::info!("validation after {update} updates: AO {ao:.4}");
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        log.history.push((update, ao));
        if log.best.as_ref().is_none_or(|b| ao > b.1) {
            log.best = Some((update, ao, theta.clone()));
            log.stale = 0;
        } else {
            log.stale += 1;
        }
        log.stale >= self.patience
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_params: ModelParameters,
    /// Best validated parameters, or the final ones without validation.
    pub best_params: ModelParameters,
    pub best_update: Option<u64>,
    pub best_validation_ao: Option<f64>,
    pub validation: Vec<(u64, f64)>,
    pub log: Vec<LogEntry>,
    pub updates: u64,
    pub deltas: Option<Vec<Vec<f64>>>,
    pub curriculum: Vec<CurriculumState>,
}

/// Trains from `init` over `sequences` with `config.workers` concurrent workers.
pub fn train(
    init: &ModelParameters,
    sequences: &[TrainingSequence],
    validation: &[Video],
    crop: CropConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if sequences.is_empty() {
        return Err(Error::invalid("empty transfer set"));
    }
    for s in sequences {
        s.validate()?;
    }
    let arch = init.arch().clone();
    let mut shared = SharedWeights::new(init.values().to_vec(), config.optimizer.clone(), config.max_updates)?;
    if config.record_deltas {
        shared = shared.record_deltas();
    }
    let vlog = Arc::new(Mutex::new(ValidationLog::default()));
    if !validation.is_empty() {
        shared = shared.with_hook(Box::new(ValidationHook {
            arch: arch.clone(),
            crop,
            videos: validation.to_vec(),
            every: config.validate_every,
            patience: config.patience,
            log: vlog.clone(),
        }));
    }
    let curriculum = Mutex::new(
        sequences
            .iter()
            .map(|s| CurriculumState::new(config.initial_horizon, s.clip.len() - 1))
            .collect::<Vec<_>>(),
    );
    let log = Mutex::new(Vec::new());
    let ctx = WorkerContext {
        arch: &arch,
        sequences,
        shared: &shared,
        curriculum: &curriculum,
        log: &log,
        crop,
        config,
    };
    let results: Vec<Result<WorkerSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.workers)
            .map(|i| {
                let ctx = &ctx;
                let seed = config.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                scope.spawn(move || {
                    let r = run_worker(ctx, TrainConfig::worker_kind(i), i, seed, None);
                    if r.is_err() {
                        ctx.shared.close();
                    }
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Protocol("worker panicked".into()))))
            .collect()
    });
    for r in results {
        r?;
    }
    let updates = shared.updates();
    let (theta, deltas, _) = shared.finish();
    let final_params = ModelParameters::from_values(&arch, theta)?;
    let vlog = vlog.lock().unwrap_or_else(|e| e.into_inner()).clone();
    let (best_params, best_update, best_ao) = match &vlog.best {
        Some((u, ao, th)) => (ModelParameters::from_values(&arch, th.to_vec())?, Some(*u), Some(*ao)),
        None => (final_params.clone(), None, None),
    };
    let mut log = log.into_inner().unwrap_or_else(|e| e.into_inner());
    log.sort_by_key(|e| e.update);
    Ok(TrainOutcome {
        final_params,
        best_params,
        best_update,
        best_validation_ao: best_ao,
        validation: vlog.history,
        log,
        updates,
        deltas,
        curriculum: curriculum.into_inner().unwrap_or_else(|e| e.into_inner()),
    })
}

//! Run configuration: one INI-style TOML file with `[env]`, `[model]`,
//! `[train]`, `[teachers]` and `[eval]` sections of flat keys.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use distrack_core::environment::{CropConfig, MotionModel, SyntheticSpec, Texture};
use distrack_core::learning::{OptimizerConfig, OptimizerKind, ReturnsMode, TrainConfig};
use distrack_core::student::ModelConfig;
use distrack_core::teachers::{ExternalTeacher, OracleNoiseTeacher, Teacher};
use distrack_core::tracking::Evaluator;
use distrack_core::transferset::{CHUNKS_PER_TRAJECTORY, CHUNK_LEN, DEFAULT_BETA};
use distrack_core::{Error, Result};

pub const ECHO_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub env: EnvSection,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub teachers: TeacherSection,
    pub eval: EvalSection,
}

/// Synthetic data generation and cropping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub seed: Option<u64>,
    pub videos: usize,
    pub prefix: String,
    pub width: usize,
    pub height: usize,
    pub length: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub motion: MotionModel,
    pub speed: f64,
    pub max_step: f64,
    pub accel: f64,
    pub scale_drift: f64,
    pub texture: Texture,
    pub noise: f64,
    /// Context factor of the crop region around the previous box.
    pub context: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            seed: None,
            videos: 50,
            prefix: "syn".into(),
            width: s.width,
            height: s.height,
            length: s.length,
            min_size: s.min_size,
            max_size: s.max_size,
            motion: s.motion,
            speed: s.speed,
            max_step: s.max_step,
            accel: s.accel,
            scale_drift: s.scale_drift,
            texture: s.texture,
            noise: s.noise,
            context: CropConfig::default().context,
        }
    }
}

impl EnvSection {
    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            width: self.width,
            height: self.height,
            length: self.length,
            min_size: self.min_size,
            max_size: self.max_size,
            motion: self.motion,
            speed: self.speed,
            max_step: self.max_step,
            accel: self.accel,
            scale_drift: self.scale_drift,
            texture: self.texture,
            noise: self.noise,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: Option<u64>,
    /// Transfer-set filter threshold.
    pub beta: f64,
    pub chunk_len: usize,
    pub chunks_per_trajectory: usize,
    pub workers: usize,
    pub t_max: usize,
    pub gamma: f64,
    pub returns: ReturnsMode,
    pub max_updates: u64,
    pub validate_every: u64,
    pub patience: usize,
    pub initial_horizon: usize,
    pub tau: f64,
    pub record_deltas: bool,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub rl_scale: f64,
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = OptimizerConfig::default();
        Self {
            seed: None,
            beta: DEFAULT_BETA,
            chunk_len: CHUNK_LEN,
            chunks_per_trajectory: CHUNKS_PER_TRAJECTORY,
            workers: t.workers,
            t_max: t.t_max,
            gamma: t.gamma,
            returns: t.returns,
            max_updates: t.max_updates,
            validate_every: t.validate_every,
            patience: t.patience,
            initial_horizon: t.initial_horizon,
            tau: t.tau,
            record_deltas: t.record_deltas,
            optimizer: o.kind,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            rl_scale: o.rl_scale,
            max_grad_norm: o.max_grad_norm,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            workers: self.workers,
            t_max: self.t_max,
            gamma: self.gamma,
            returns: self.returns,
            max_updates: self.max_updates,
            validate_every: self.validate_every,
            patience: self.patience,
            initial_horizon: self.initial_horizon,
            tau: self.tau,
            seed,
            record_deltas: self.record_deltas,
            optimizer: OptimizerConfig {
                kind: self.optimizer,
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
                rl_scale: self.rl_scale,
                max_grad_norm: self.max_grad_norm,
            },
        }
    }
}

/// Live teachers. Oracle teachers are named `oracle<NN>` after their target
/// IoU in percent; external ones are given as `"id=program arg…"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherSection {
    pub oracle: Vec<f64>,
    pub oracle_seed: u64,
    pub external: Vec<String>,
    pub timeout_secs: f64,
}

impl Default for TeacherSection {
    fn default() -> Self {
        Self {
            oracle: vec![0.9],
            oracle_seed: 0,
            external: Vec::new(),
            timeout_secs: distrack_core::teachers::EXTERNAL_TIMEOUT.as_secs_f64(),
        }
    }
}

pub fn oracle_id(target: f64) -> String {
    format!("oracle{:02}", (target * 100.0).round() as i64)
}

impl TeacherSection {
    pub fn build(&self) -> Result<Vec<Arc<dyn Teacher>>> {
        let mut out: Vec<Arc<dyn Teacher>> = Vec::new();
        for (i, &target) in self.oracle.iter().enumerate() {
            let seed = self.oracle_seed.wrapping_add(i as u64);
            out.push(Arc::new(OracleNoiseTeacher::calibrated(oracle_id(target), target, seed)?));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("teachers.timeout_secs must be positive".into()));
        }
        for spec in &self.external {
            let (id, cmd) = spec
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("external teacher `{spec}` is not `id=program args`")))?;
            let mut words = cmd.split_whitespace();
            let program = words
                .next()
                .ok_or_else(|| Error::Config(format!("external teacher `{id}` has no program")))?;
            let teacher = ExternalTeacher::new(id.trim(), program, words.map(String::from).collect())
                .with_timeout(Duration::from_secs_f64(self.timeout_secs));
            out.push(Arc::new(teacher));
        }
        let mut ids: Vec<&str> = out.iter().map(|t| t.id()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate teacher ids".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorName {
    #[default]
    ValueHead,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub evaluator: EvaluatorName,
    pub dataset: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            evaluator: EvaluatorName::ValueHead,
            dataset: "synthetic".into(),
        }
    }
}

impl EvalSection {
    pub fn evaluator(&self) -> Evaluator {
        match self.evaluator {
            EvaluatorName::ValueHead => Evaluator::ValueHead,
            EvaluatorName::Oracle => Evaluator::Oracle,
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                    context: format!("reading {}", p.display()),
                    source: e,
                })?;
                Self::parse(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn crop(&self) -> CropConfig {
        CropConfig {
            context: self.env.context,
            patch_size: (self.model.patch_size, self.model.patch_size),
        }
    }

    /// Writes the effective configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::Io {
            context: format!("writing {}", path.display()),
            source: e,
        })
    }
}

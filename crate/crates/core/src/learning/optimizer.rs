//! Update rules and the shared parameter store the workers write into.

use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments with variance rectification.
    #[default]
    Radam,
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay applied on distillation updates only.
    pub weight_decay: f64,
    /// Multiplier on actor-critic gradients.
    pub rl_scale: f64,
    /// Optional global-norm clip on the (scaled) gradient.
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Radam,
            lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            rl_scale: 1e-3,
            max_grad_norm: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.rl_scale > 0.0
            && self.max_grad_norm.is_none_or(|n| n > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateKind {
    Distill,
    Autonomous,
}

/// Moment state of one optimizer.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, dim: usize) -> Self {
        Self {
            config,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Parameter change for gradient `grad` at `theta`. Decoupled weight
    /// decay is included when `decay` is set.
    pub fn delta(&mut self, theta: &[f64], grad: &[f64], decay: bool) -> Vec<f64> {
        let c = &self.config;
        self.t += 1;
        let mut delta = vec![0.0; grad.len()];
        match c.kind {
            OptimizerKind::Sgd => {
                for (d, g) in delta.iter_mut().zip(grad) {
                    *d = -c.lr * g;
                }
            }
            OptimizerKind::Adam | OptimizerKind::Radam => {
                let t = self.t as f64;
                let bc1 = 1.0 - c.beta1.powf(t);
                let bc2 = 1.0 - c.beta2.powf(t);
                let rect = match c.kind {
                    OptimizerKind::Adam => Some(1.0),
                    _ => {
                        let rho_inf = 2.0 / (1.0 - c.beta2) - 1.0;
                        let rho = rho_inf - 2.0 * t * c.beta2.powf(t) / bc2;
                        (rho > 5.0).then(|| {
                            ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt()
                        })
                    }
                };
                for i in 0..grad.len() {
                    let g = grad[i];
                    self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
                    self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    delta[i] = match rect {
                        Some(r) => -c.lr * r * m_hat / ((self.v[i] / bc2).sqrt() + c.eps),
                        None => -c.lr * m_hat,
                    };
                }
            }
        }
        if decay && c.weight_decay > 0.0 {
            for (d, w) in delta.iter_mut().zip(theta) {
                *d -= c.lr * c.weight_decay * w;
            }
        }
        delta
    }
}

/// Called under the store lock after every accepted update; returning
/// `true` closes the store.
pub trait UpdateHook: Send {
    fn after_update(&mut self, update: u64, theta: &Arc<Vec<f64>>) -> bool;
}

struct Inner {
    theta: Arc<Vec<f64>>,
    optimizer: Optimizer,
    updates: u64,
    max_updates: u64,
    closed: bool,
    deltas: Option<Vec<Vec<f64>>>,
    hook: Option<Box<dyn UpdateHook>>,
}

/// The master parameters θ. Reads return whole snapshots; updates are
/// serialized and applied as `θ += δ` element by element.
pub struct SharedWeights {
    inner: Mutex<Inner>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Applied {
    /// Accepted as update number `n` (1-based).
    Accepted(u64),
    /// The store no longer takes updates.
    Closed,
}

impl SharedWeights {
    pub fn new(theta: Vec<f64>, optimizer: OptimizerConfig, max_updates: u64) -> Result<Self> {
        optimizer.validate()?;
        let dim = theta.len();
        Ok(Self {
            inner: Mutex::new(Inner {
                theta: Arc::new(theta),
                optimizer: Optimizer::new(optimizer, dim),
                updates: 0,
                max_updates,
                closed: max_updates == 0,
                deltas: None,
                hook: None,
            }),
        })
    }

    /// Keeps every applied δ so the run can be replayed.
    pub fn record_deltas(self) -> Self {
        self.lock().deltas = Some(Vec::new());
        self
    }

    pub fn with_hook(self, hook: Box<dyn UpdateHook>) -> Self {
        self.lock().hook = Some(hook);
        self
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> Arc<Vec<f64>> {
        self.lock().theta.clone()
    }

    pub fn updates(&self) -> u64 {
        self.lock().updates
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    pub fn close(&self) {
        self.lock().closed = true;
    }

    /// Applies one gradient. Actor-critic gradients are scaled by
    /// `rl_scale`; distillation updates also decay the weights.
    pub fn apply(&self, grad: &[f64], kind: UpdateKind) -> Result<Applied> {
        let mut inner = self.lock();
        if inner.closed {
            return Ok(Applied::Closed);
        }
        if grad.len() != inner.theta.len() {
            return Err(Error::invalid("gradient length does not match parameters"));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            log::warn!("rejected update with non-finite gradient at coordinate {i}");
            return Err(Error::NonFinite {
                step: inner.updates as usize,
                what: format!("gradient coordinate {i}"),
            });
        }
        let cfg = inner.optimizer.config().clone();
        let mut g: Vec<f64> = match kind {
            UpdateKind::Distill => grad.to_vec(),
            UpdateKind::Autonomous => grad.iter().map(|v| v * cfg.rl_scale).collect(),
        };
        if let Some(max) = cfg.max_grad_norm {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > max {
                let s = max / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
        let Inner {
            theta,
            optimizer,
            ..
        } = &mut *inner;
        let delta = optimizer.delta(theta, &g, kind == UpdateKind::Distill);
        let th = Arc::make_mut(theta);
        for (w, d) in th.iter_mut().zip(&delta) {
            *w += d;
        }
        inner.updates += 1;
        let n = inner.updates;
        if let Some(log) = inner.deltas.as_mut() {
            log.push(delta);
        }
        if n >= inner.max_updates {
            inner.closed = true;
        }
        let theta = inner.theta.clone();
        if let Some(mut hook) = inner.hook.take() {
            if hook.after_update(n, &theta) {
                inner.closed = true;
            }
            inner.hook = Some(hook);
        }
        Ok(Applied::Accepted(n))
    }

    /// Final parameters, applied deltas (if recorded) and the hook.
    pub fn finish(self) -> Finished {
        let inner = self.inner.into_inner().unwrap_or_else(|e| e.into_inner());
        let theta = Arc::try_unwrap(inner.theta).unwrap_or_else(|a| (*a).clone());
        (theta, inner.deltas, inner.hook)
    }
}

/// Output of [`SharedWeights::finish`].
pub type Finished = (Vec<f64>, Option<Vec<Vec<f64>>>, Option<Box<dyn UpdateHook>>);

/// Replays recorded deltas onto `initial` in log order.
pub fn replay_deltas(initial: &[f64], deltas: &[Vec<f64>]) -> Vec<f64> {
    let mut theta = initial.to_vec();
    for d in deltas {
        for (w, x) in theta.iter_mut().zip(d) {
            *w += x;
        }
    }
    theta
}

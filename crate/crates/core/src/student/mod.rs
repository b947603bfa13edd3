//! The student network: a weight-shared patch encoder applied to both crops,
//! two fully connected fusion layers, an LSTM core, a `tanh` policy head and
//! a linear value head. Forward and reverse mode are written by hand over a
//! flat `f64` parameter vector.

mod checkpoint;
mod gradcheck;
mod layers;

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load, save, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckReport, Objective, WindowObjective, GRAD_CHECK_EPS};

use crate::environment::State;
use crate::error::{Error, Result};
use crate::frame::Patch;
use crate::geometry::Action;
use layers::{
    avg_pool, conv_backward, conv_forward, dense_backward, dense_forward, relu_in_place, relu_mask, sigmoid,
    ConvShape,
};

pub const ACTION_DIM: usize = 4;
/// During inference the hidden state is restored every this many frames.
pub const HIDDEN_RESET_PERIOD: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Stride-2 3x3 convolutions with ReLU, one stage per entry of `channels`.
    Conv,
    /// Average pooling by `pool_factor`, then one ReLU layer of `pool_features`.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square input patches.
    pub patch_size: usize,
    pub encoder: EncoderKind,
    pub channels: Vec<usize>,
    pub pool_factor: usize,
    pub pool_features: usize,
    pub fc_size: usize,
    pub hidden_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            encoder: EncoderKind::Conv,
            channels: vec![8, 16, 16],
            pool_factor: 4,
            pool_features: 64,
            fc_size: 64,
            hidden_size: 64,
        }
    }
}

impl ModelConfig {
    /// The smallest supported configuration, used where speed matters more than capacity.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderKind::Pooled,
            pool_factor: 8,
            pool_features: 16,
            fc_size: 16,
            hidden_size: 8,
            ..Self::default()
        }
    }

    /// Stable text form hashed into checkpoint fingerprints.
    pub fn canonical(&self) -> String {
        let relevant = match self.encoder {
            EncoderKind::Conv => format!("conv{:?}", self.channels),
            EncoderKind::Pooled => format!("pooled/{}x{}", self.pool_factor, self.pool_features),
        };
        format!(
            "student:v1;patch={};enc={};fc={};hidden={}",
            self.patch_size, relevant, self.fc_size, self.hidden_size
        )
    }
}

/// A named contiguous slice of the parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub name: String,
    pub range: Range<usize>,
    pub fan_in: usize,
}

/// Weight range directly followed by its bias range.
#[derive(Clone, Debug)]
struct Affine {
    w: Range<usize>,
    b: Range<usize>,
}

impl Affine {
    fn span(&self) -> Range<usize> {
        self.w.start..self.b.end
    }
}

#[derive(Clone, Debug)]
enum Encoder {
    Conv(Vec<(ConvShape, Affine)>),
    Pooled { factor: usize, fc: Affine },
}

/// Shapes and parameter layout derived from a [`ModelConfig`].
#[derive(Clone, Debug)]
pub struct Architecture {
    config: ModelConfig,
    partitions: Vec<Partition>,
    encoder: Encoder,
    feature_len: usize,
    fc1: Affine,
    fc2: Affine,
    lstm_x: Range<usize>,
    lstm_h: Range<usize>,
    lstm_b: Range<usize>,
    policy: Affine,
    value: Affine,
    len: usize,
}

struct LayoutBuilder {
    partitions: Vec<Partition>,
    len: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, len: usize, fan_in: usize) -> Range<usize> {
        let range = self.len..self.len + len;
        self.len += len;
        self.partitions.push(Partition {
            name,
            range: range.clone(),
            fan_in,
        });
        range
    }

    fn affine(&mut self, name: &str, out: usize, fan_in: usize, weight_len: usize) -> Affine {
        let w = self.push(format!("{name}.weight"), weight_len, fan_in);
        let b = self.push(format!("{name}.bias"), out, fan_in);
        Affine { w, b }
    }
}

impl Architecture {
    pub fn new(config: ModelConfig) -> Result<Arc<Self>> {
        let bad = |m: String| Err(Error::Config(m));
        if config.patch_size < 2 {
            return bad(format!("patch_size {} too small", config.patch_size));
        }
        if config.fc_size == 0 || config.hidden_size == 0 {
            return bad("fc_size and hidden_size must be positive".into());
        }
        let mut lb = LayoutBuilder {
            partitions: Vec::new(),
            len: 0,
        };
        let (encoder, feature_len) = match config.encoder {
            EncoderKind::Conv => {
                if config.channels.is_empty() || config.channels.contains(&0) {
                    return bad("conv encoder needs non-empty positive channels".into());
                }
                let (mut cin, mut side) = (Patch::CHANNELS, config.patch_size);
                let mut stages = Vec::new();
                for (i, &cout) in config.channels.iter().enumerate() {
                    let shape = ConvShape { cin, cout, side };
                    let fan_in = cin * layers::KERNEL * layers::KERNEL;
                    let aff = lb.affine(&format!("encoder.conv{i}"), cout, fan_in, shape.weight_len());
                    stages.push((shape, aff));
                    cin = cout;
                    side = shape.out_side();
                }
                (Encoder::Conv(stages), cin * side * side)
            }
            EncoderKind::Pooled => {
                let f = config.pool_factor;
                if f == 0 || !config.patch_size.is_multiple_of(f) || config.pool_features == 0 {
                    return bad(format!(
                        "pool factor {f} must divide patch size {}",
                        config.patch_size
                    ));
                }
                let side = config.patch_size / f;
                let fan_in = Patch::CHANNELS * side * side;
                let fc = lb.affine("encoder.fc", config.pool_features, fan_in, fan_in * config.pool_features);
                (Encoder::Pooled { factor: f, fc }, config.pool_features)
            }
        };
        let (fc, hid) = (config.fc_size, config.hidden_size);
        let fc1 = lb.affine("fusion.fc1", fc, 2 * feature_len, fc * 2 * feature_len);
        let fc2 = lb.affine("fusion.fc2", fc, fc, fc * fc);
        let lstm_x = lb.push("lstm.w_x".into(), 4 * hid * fc, fc);
        let lstm_h = lb.push("lstm.w_h".into(), 4 * hid * hid, hid);
        let lstm_b = lb.push("lstm.bias".into(), 4 * hid, hid);
        let policy = lb.affine("policy", ACTION_DIM, hid, ACTION_DIM * hid);
        let value = lb.affine("value", 1, hid, hid);
        Ok(Arc::new(Self {
            config,
            partitions: lb.partitions,
            encoder,
            feature_len,
            fc1,
            fc2,
            lstm_x,
            lstm_h,
            lstm_b,
            policy,
            value,
            len: lb.len,
        }))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn num_params(&self) -> usize {
        self.len
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Partition-qualified name of coordinate `i`, e.g. `lstm.w_h[17]`.
    pub fn coordinate_name(&self, i: usize) -> String {
        match self.partitions.iter().find(|p| p.range.contains(&i)) {
            Some(p) => format!("{}[{}]", p.name, i - p.range.start),
            None => format!("<out of range {i}>"),
        }
    }

    /// Value range of coordinates belonging to the value head.
    pub fn value_head(&self) -> Range<usize> {
        self.value.span()
    }

    pub fn policy_head(&self) -> Range<usize> {
        self.policy.span()
    }
}

/// Flat parameter vector together with the layout that names it.
#[derive(Clone, Debug)]
pub struct ModelParameters {
    arch: Arc<Architecture>,
    values: Vec<f64>,
}

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.arch.config == other.arch.config
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ModelParameters {
    pub fn zeros(arch: &Arc<Architecture>) -> Self {
        Self {
            arch: arch.clone(),
            values: vec![0.0; arch.len],
        }
    }

    /// Uniform fan-in initialization: `U(-a, a)` with `a = sqrt(6 / fan_in)`
    /// for layers followed by ReLU and `1 / sqrt(fan_in)` elsewhere. Biases start at zero.
    pub fn init(arch: &Arc<Architecture>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; arch.len];
        for p in &arch.partitions {
            if p.name.ends_with("bias") {
                continue;
            }
            let relu = p.name.starts_with("encoder") || p.name.starts_with("fusion");
            let bound = if relu {
                (6.0 / p.fan_in as f64).sqrt()
            } else {
                1.0 / (p.fan_in as f64).sqrt()
            };
            for v in &mut values[p.range.clone()] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self {
            arch: arch.clone(),
            values,
        }
    }

    pub fn from_values(arch: &Arc<Architecture>, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.len {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                arch.len,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite parameter {}",
                arch.coordinate_name(i)
            )));
        }
        Ok(Self {
            arch: arch.clone(),
            values,
        })
    }

    pub fn arch(&self) -> &Arc<Architecture> {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(size: usize) -> Self {
        Self {
            h: vec![0.0; size],
            c: vec![0.0; size],
        }
    }

    pub fn size(&self) -> usize {
        self.h.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StudentOutput {
    pub action: Action,
    pub value: f64,
}

/// Loss sensitivity with respect to one step's outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OutputGrad {
    pub action: [f64; ACTION_DIM],
    pub value: f64,
}

/// Activations of one forward step, kept for reverse mode.
#[derive(Clone, Debug)]
pub struct StepTape {
    branches: [Vec<Vec<f64>>; 2],
    fused: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    gates: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    action: [f64; ACTION_DIM],
    /// Hash of every ReLU on/off decision taken in this step.
    signature: u64,
}

impl StepTape {
    pub fn signature(&self) -> u64 {
        self.signature
    }
}

const PIXEL_MEAN: f64 = 128.0;
const PIXEL_SCALE: f64 = 64.0;

fn fold_pattern(sig: &mut u64, v: &[f64]) {
    for &x in v {
        *sig = (*sig ^ u64::from(x > 0.0)).wrapping_mul(0x0000_0100_0000_01b3);
    }
}

fn normalized(p: &Patch) -> Vec<f64> {
    p.data().iter().map(|v| (v - PIXEL_MEAN) / PIXEL_SCALE).collect()
}

impl Architecture {
    fn check_state(&self, state: &State, hidden: &HiddenState) -> Result<()> {
        let want = (self.config.patch_size, self.config.patch_size);
        for p in [&state.patch_prev, &state.patch_cur] {
            if p.size() != want {
                return Err(Error::Config(format!(
                    "patch {:?} does not match configured size {:?}",
                    p.size(),
                    want
                )));
            }
        }
        if hidden.h.len() != self.config.hidden_size || hidden.c.len() != self.config.hidden_size {
            return Err(Error::Config(format!(
                "hidden state of size {} for a model with hidden size {}",
                hidden.h.len(),
                self.config.hidden_size
            )));
        }
        Ok(())
    }

    /// Activations of the encoder; the last entry is the feature vector.
    fn encode(&self, p: &[f64], patch: &Patch, sig: &mut u64) -> Vec<Vec<f64>> {
        let mut acts = vec![normalized(patch)];
        match &self.encoder {
            Encoder::Conv(stages) => {
                for (shape, aff) in stages {
                    let mut y = vec![0.0; shape.out_len()];
                    conv_forward(&p[aff.w.clone()], &p[aff.b.clone()], acts.last().unwrap(), shape, &mut y);
                    relu_in_place(&mut y);
                    fold_pattern(sig, &y);
                    acts.push(y);
                }
            }
            Encoder::Pooled { factor, fc } => {
                let side = self.config.patch_size / factor;
                let mut pooled = vec![0.0; Patch::CHANNELS * side * side];
                avg_pool(&acts[0], Patch::CHANNELS, self.config.patch_size, *factor, &mut pooled);
                let mut y = vec![0.0; self.config.pool_features];
                dense_forward(&p[fc.w.clone()], &p[fc.b.clone()], &pooled, &mut y);
                relu_in_place(&mut y);
                fold_pattern(sig, &y);
                acts.push(pooled);
                acts.push(y);
            }
        }
        acts
    }

    fn encode_backward(&self, p: &[f64], acts: &[Vec<f64>], dfeat: Vec<f64>, grad: &mut [f64]) {
        match &self.encoder {
            Encoder::Conv(stages) => {
                let mut dy = dfeat;
                for (k, (shape, aff)) in stages.iter().enumerate().rev() {
                    relu_mask(&acts[k + 1], &mut dy);
                    let (dw, db) = grad[aff.span()].split_at_mut(aff.w.len());
                    if k == 0 {
                        conv_backward(&p[aff.w.clone()], &acts[k], &dy, shape, dw, db, None);
                    } else {
                        let mut dx = vec![0.0; acts[k].len()];
                        conv_backward(&p[aff.w.clone()], &acts[k], &dy, shape, dw, db, Some(&mut dx));
                        dy = dx;
                    }
                }
            }
            Encoder::Pooled { fc, .. } => {
                let mut dy = dfeat;
                relu_mask(&acts[2], &mut dy);
                let (dw, db) = grad[fc.span()].split_at_mut(fc.w.len());
                dense_backward(&p[fc.w.clone()], &acts[1], &dy, dw, db, None);
            }
        }
    }

    fn step(&self, p: &[f64], state: &State, hidden: &HiddenState) -> Result<(StudentOutput, StepTape)> {
        self.check_state(state, hidden)?;
        let mut signature = 0xcbf2_9ce4_8422_2325u64;
        let prev = self.encode(p, &state.patch_prev, &mut signature);
        let cur = self.encode(p, &state.patch_cur, &mut signature);
        let mut fused = Vec::with_capacity(2 * self.feature_len);
        fused.extend_from_slice(prev.last().unwrap());
        fused.extend_from_slice(cur.last().unwrap());

        let (fc, hid) = (self.config.fc_size, self.config.hidden_size);
        let mut z1 = vec![0.0; fc];
        dense_forward(&p[self.fc1.w.clone()], &p[self.fc1.b.clone()], &fused, &mut z1);
        relu_in_place(&mut z1);
        let mut z2 = vec![0.0; fc];
        dense_forward(&p[self.fc2.w.clone()], &p[self.fc2.b.clone()], &z1, &mut z2);
        relu_in_place(&mut z2);
        fold_pattern(&mut signature, &z1);
        fold_pattern(&mut signature, &z2);

        // Gate order: input, forget, cell, output.
        let mut gates = vec![0.0; 4 * hid];
        dense_forward(&p[self.lstm_x.clone()], &p[self.lstm_b.clone()], &z2, &mut gates);
        let zero_bias = vec![0.0; 4 * hid];
        let mut rec = vec![0.0; 4 * hid];
        dense_forward(&p[self.lstm_h.clone()], &zero_bias, &hidden.h, &mut rec);
        for (g, r) in gates.iter_mut().zip(&rec) {
            *g += r;
        }
        for (k, g) in gates.iter_mut().enumerate() {
            *g = if k / hid == 2 { g.tanh() } else { sigmoid(*g) };
        }
        let mut c = vec![0.0; hid];
        let mut tanh_c = vec![0.0; hid];
        let mut h = vec![0.0; hid];
        for j in 0..hid {
            let (i, f, g, o) = (gates[j], gates[hid + j], gates[2 * hid + j], gates[3 * hid + j]);
            c[j] = f * hidden.c[j] + i * g;
            tanh_c[j] = c[j].tanh();
            h[j] = o * tanh_c[j];
        }

        let mut pre = [0.0; ACTION_DIM];
        dense_forward(&p[self.policy.w.clone()], &p[self.policy.b.clone()], &h, &mut pre);
        let action = pre.map(f64::tanh);
        let mut value = [0.0];
        dense_forward(&p[self.value.w.clone()], &p[self.value.b.clone()], &h, &mut value);

        let out = StudentOutput {
            action: Action::from_array(action),
            value: value[0],
        };
        let tape = StepTape {
            branches: [prev, cur],
            fused,
            z1,
            z2,
            h_prev: hidden.h.clone(),
            c_prev: hidden.c.clone(),
            gates,
            c,
            tanh_c,
            h,
            action,
            signature,
        };
        Ok((out, tape))
    }
}

impl StepTape {
    fn hidden(&self) -> HiddenState {
        HiddenState {
            h: self.h.clone(),
            c: self.c.clone(),
        }
    }
}

/// One step of the student: action, value and the advanced hidden state.
pub fn forward(params: &ModelParameters, state: &State, hidden: &HiddenState) -> Result<(StudentOutput, HiddenState)> {
    let (out, tape) = params.arch.step(&params.values, state, hidden)?;
    Ok((out, tape.hidden()))
}

/// Like [`forward`], also returning the activations needed by [`backward`].
pub fn forward_taped(
    params: &ModelParameters,
    state: &State,
    hidden: &HiddenState,
) -> Result<(StudentOutput, HiddenState, StepTape)> {
    let (out, tape) = params.arch.step(&params.values, state, hidden)?;
    let next = tape.hidden();
    Ok((out, next, tape))
}

/// Runs consecutive steps from `h0`, returning outputs, tapes and the final hidden state.
pub fn forward_window(
    params: &ModelParameters,
    states: &[State],
    h0: &HiddenState,
) -> Result<(Vec<StudentOutput>, Vec<StepTape>, HiddenState)> {
    let mut hidden = h0.clone();
    let mut outs = Vec::with_capacity(states.len());
    let mut tapes = Vec::with_capacity(states.len());
    for s in states {
        let (o, h, t) = forward_taped(params, s, &hidden)?;
        outs.push(o);
        tapes.push(t);
        hidden = h;
    }
    Ok((outs, tapes, hidden))
}

/// Reverse mode through a window of consecutive steps. The hidden state that
/// entered the first step is a constant; gradients flow through time between
/// the recorded steps.
pub fn backward(params: &ModelParameters, tapes: &[StepTape], grads: &[OutputGrad]) -> Result<Vec<f64>> {
    if tapes.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} tapes but {} output gradients",
            tapes.len(),
            grads.len()
        )));
    }
    let a = &params.arch;
    let p = &params.values;
    let hid = a.config.hidden_size;
    let mut grad = vec![0.0; a.len];
    let mut dh_next = vec![0.0; hid];
    let mut dc_next = vec![0.0; hid];
    let mut scratch_bias = vec![0.0; 4 * hid];

    for (step, (tape, og)) in tapes.iter().zip(grads).enumerate().rev() {
        if !(og.value.is_finite() && og.action.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite {
                step,
                what: "output gradient".into(),
            });
        }
        let mut dh = std::mem::take(&mut dh_next);
        let dpre: Vec<f64> = (0..ACTION_DIM)
            .map(|k| og.action[k] * (1.0 - tape.action[k] * tape.action[k]))
            .collect();
        {
            let (dw, db) = grad[a.policy.span()].split_at_mut(a.policy.w.len());
            dense_backward(&p[a.policy.w.clone()], &tape.h, &dpre, dw, db, Some(&mut dh));
        }
        {
            let (dw, db) = grad[a.value.span()].split_at_mut(a.value.w.len());
            dense_backward(&p[a.value.w.clone()], &tape.h, &[og.value], dw, db, Some(&mut dh));
        }

        let mut dgates = vec![0.0; 4 * hid];
        let mut dc_prev = vec![0.0; hid];
        for j in 0..hid {
            let (i, f, g, o) = (
                tape.gates[j],
                tape.gates[hid + j],
                tape.gates[2 * hid + j],
                tape.gates[3 * hid + j],
            );
            let dc = dh[j] * o * (1.0 - tape.tanh_c[j] * tape.tanh_c[j]) + dc_next[j];
            let d_o = dh[j] * tape.tanh_c[j];
            dgates[j] = dc * g * i * (1.0 - i);
            dgates[hid + j] = dc * tape.c_prev[j] * f * (1.0 - f);
            dgates[2 * hid + j] = dc * i * (1.0 - g * g);
            dgates[3 * hid + j] = d_o * o * (1.0 - o);
            dc_prev[j] = dc * f;
        }
        let mut dz2 = vec![0.0; a.config.fc_size];
        let mut dh_prev = vec![0.0; hid];
        {
            let (dwx, rest) = grad[a.lstm_x.start..a.lstm_b.end].split_at_mut(a.lstm_x.len());
            let (dwh, db) = rest.split_at_mut(a.lstm_h.len());
            dense_backward(&p[a.lstm_x.clone()], &tape.z2, &dgates, dwx, db, Some(&mut dz2));
            dense_backward(&p[a.lstm_h.clone()], &tape.h_prev, &dgates, dwh, &mut scratch_bias, Some(&mut dh_prev));
        }
        dh_next = dh_prev;
        dc_next = dc_prev;

        relu_mask(&tape.z2, &mut dz2);
        let mut dz1 = vec![0.0; a.config.fc_size];
        {
            let (dw, db) = grad[a.fc2.span()].split_at_mut(a.fc2.w.len());
            dense_backward(&p[a.fc2.w.clone()], &tape.z1, &dz2, dw, db, Some(&mut dz1));
        }
        relu_mask(&tape.z1, &mut dz1);
        let mut dfused = vec![0.0; tape.fused.len()];
        {
            let (dw, db) = grad[a.fc1.span()].split_at_mut(a.fc1.w.len());
            dense_backward(&p[a.fc1.w.clone()], &tape.fused, &dz1, dw, db, Some(&mut dfused));
        }
        let dcur = dfused.split_off(a.feature_len);
        a.encode_backward(p, &tape.branches[0], dfused, &mut grad);
        a.encode_backward(p, &tape.branches[1], dcur, &mut grad);
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            what: format!("gradient of {}", a.coordinate_name(i)),
        });
    }
    Ok(grad)
}

/// Per-step loss values and their sensitivities to the step outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossEval {
    pub per_step: Vec<f64>,
    pub grads: Vec<OutputGrad>,
}

impl LossEval {
    pub fn total(&self) -> f64 {
        self.per_step.iter().sum()
    }
}

/// A scalar loss over the outputs of a window of consecutive steps.
pub trait WindowLoss {
    fn evaluate(&self, outputs: &[StudentOutput]) -> LossEval;

    /// Identifies the piece of a piecewise-smooth loss that `outputs` fall in.
    fn signature(&self, _outputs: &[StudentOutput]) -> u64 {
        0
    }
}

/// Forward over `states` from `h0`, evaluate `loss`, and return its value and
/// exact gradient with respect to every parameter.
pub fn loss_and_gradient(
    params: &ModelParameters,
    states: &[State],
    h0: &HiddenState,
    loss: &dyn WindowLoss,
) -> Result<(f64, Vec<f64>)> {
    let (outs, tapes, _) = forward_window(params, states, h0)?;
    let eval = loss.evaluate(&outs);
    if let Some(step) = eval.per_step.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            step,
            what: "loss".into(),
        });
    }
    let grad = backward(params, &tapes, &eval.grads)?;
    Ok((eval.total(), grad))
}

/// Hidden-state restore schedule used at inference time: the state produced
/// by step 1 is saved and reinstated at steps `1 + k * period`.
#[derive(Clone, Debug)]
pub struct HiddenSchedule {
    size: usize,
    period: usize,
    snapshot: Option<HiddenState>,
}

impl HiddenSchedule {
    pub fn new(size: usize) -> Self {
        Self::with_period(size, HIDDEN_RESET_PERIOD)
    }

    pub fn with_period(size: usize, period: usize) -> Self {
        Self {
            size,
            period: period.max(1),
            snapshot: None,
        }
    }

    /// The step-1 snapshot, or zeros before any prediction.
    pub fn reset_hidden(&self) -> HiddenState {
        self.snapshot.clone().unwrap_or_else(|| HiddenState::zeros(self.size))
    }

    /// Hidden state to feed into step `t` (1-based) given the running one.
    pub fn input_for(&self, t: usize, running: HiddenState) -> HiddenState {
        if t > 1 && (t - 1).is_multiple_of(self.period) {
            self.reset_hidden()
        } else {
            running
        }
    }

    /// Records the hidden state produced by step `t`.
    pub fn record(&mut self, t: usize, produced: &HiddenState) {
        if t == 1 {
            self.snapshot = Some(produced.clone());
        }
    }
}

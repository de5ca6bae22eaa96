//! The layered policy network: an input projection, a stack of residual tanh
//! blocks of constant width, and a linear action head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, OptimState, Parameters};

/// `y = W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Matrix::uniform(out_dim, in_dim, bound, rng);
        let b = Matrix::uniform(1, out_dim, bound, rng).as_slice().to_vec();
        Affine { w, b }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    #[inline]
    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.w.affine_into(&self.b, x, out);
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.out_dim()];
        self.apply_into(x, &mut out);
        out
    }

    /// Accumulates `gx += Wᵀ gy` and, when `grads` is given, the weight and
    /// bias gradients.
    #[inline]
    pub fn backward(&self, x: &[f64], gy: &[f64], gx: Option<&mut [f64]>, grads: Option<&mut Affine>) {
        if let Some(g) = grads {
            g.w.outer_acc(gy, x);
            for (gb, v) in g.b.iter_mut().zip(gy) {
                *gb += v;
            }
        }
        if let Some(gx) = gx {
            self.w.transpose_mul_acc(gy, gx);
        }
    }

    /// Multiply-accumulates for one application.
    pub fn macs(&self) -> u64 {
        (self.w.rows() * self.w.cols()) as u64
    }
}

impl Parameters for Affine {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        f(self.w.as_slice());
        f(&self.b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        f(self.w.as_mut_slice());
        f(&mut self.b);
    }
}

/// `y = x + fc2(tanh(fc1(x)))`. Used for backbone blocks (inner width `d`)
/// and for adapters (inner width `d/4`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualMlp {
    pub fc1: Affine,
    pub fc2: Affine,
}

impl ResidualMlp {
    pub fn init(dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualMlp {
            fc1: Affine::init(inner, dim, rng),
            fc2: Affine::init(dim, inner, rng),
        }
    }

    pub fn zeros(dim: usize, inner: usize) -> Self {
        ResidualMlp {
            fc1: Affine::zeros(inner, dim),
            fc2: Affine::zeros(dim, inner),
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.in_dim()
    }

    pub fn inner(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = vec![0.0; self.inner()];
        let mut y = vec![0.0; self.dim()];
        self.forward_cached(x, &mut hidden, &mut y);
        y
    }

    /// Writes `tanh(fc1(x))` into `hidden` (kept for the backward pass) and the
    /// block output into `y`.
    #[inline]
    pub fn forward_cached(&self, x: &[f64], hidden: &mut [f64], y: &mut [f64]) {
        self.fc1.apply_into(x, hidden);
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        self.fc2.apply_into(hidden, y);
        for (o, xi) in y.iter_mut().zip(x) {
            *o += xi;
        }
    }

    /// Returns the input gradient; accumulates parameter gradients into
    /// `grads` when given.
    pub fn backward(&self, x: &[f64], hidden: &[f64], gy: &[f64], grads: Option<&mut ResidualMlp>) -> Vec<f64> {
        let mut ghidden = vec![0.0; self.inner()];
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.fc1), Some(&mut g.fc2)),
            None => (None, None),
        };
        self.fc2.backward(hidden, gy, Some(&mut ghidden), g2);
        for (g, h) in ghidden.iter_mut().zip(hidden) {
            *g *= 1.0 - h * h;
        }
        let mut gx = gy.to_vec();
        self.fc1.backward(x, &ghidden, Some(&mut gx), g1);
        gx
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs() + self.fc2.macs()
    }
}

impl Parameters for ResidualMlp {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub obs_dim: usize,
    pub instr_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub action_dim: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            obs_dim: crate::sim::OBS_DIM,
            instr_dim: crate::sim::SimConfig::default().subtasks,
            hidden: 64,
            depth: 12,
            action_dim: crate::sim::ACTION_DIM,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.obs_dim", self.obs_dim),
            ("model.instr_dim", self.instr_dim),
            ("model.hidden", self.hidden),
            ("model.action_dim", self.action_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        if self.depth < 4 {
            return Err(Error::config("model.depth", "must be at least 4"));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        (self.obs_dim + self.instr_dim + 1) * d + self.depth * (2 * d * d + 2 * d) + (d + 1) * self.action_dim
    }
}

/// Hidden states `x_0 .. x_N`: the embedding output and each block's output.
/// `states[i]` is the input to block `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub states: Vec<Vec<f64>>,
}

impl ActivationTrace {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trace is never empty")
    }
}

/// One behavior-cloning example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub obs: Vec<f64>,
    pub instr: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub embed: Affine,
    pub blocks: Vec<ResidualMlp>,
    pub head: Affine,
}

impl PolicyModel {
    pub fn build(config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden;
        let embed = Affine::init(d, config.obs_dim + config.instr_dim, &mut rng);
        let blocks = (0..config.depth)
            .map(|_| ResidualMlp::init(d, d, &mut rng))
            .collect();
        let head = Affine::init(config.action_dim, d, &mut rng);
        Ok(PolicyModel {
            config,
            embed,
            blocks,
            head,
        })
    }

    /// Same shapes, every parameter zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    fn check_inputs(&self, obs: &[f64], instr: &[f64]) -> Result<()> {
        if obs.len() != self.config.obs_dim || instr.len() != self.config.instr_dim {
            return Err(Error::Shape(format!(
                "expected obs {} / instr {}, got {} / {}",
                self.config.obs_dim,
                self.config.instr_dim,
                obs.len(),
                instr.len()
            )));
        }
        Ok(())
    }

    pub fn embed_input(&self, obs: &[f64], instr: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(obs, instr)?;
        let mut input = Vec::with_capacity(obs.len() + instr.len());
        input.extend_from_slice(obs);
        input.extend_from_slice(instr);
        Ok(self.embed.apply(&input))
    }

    pub fn head_output(&self, x: &[f64]) -> Vec<f64> {
        self.head.apply(x)
    }

    pub fn forward_recorded(&self, obs: &[f64], instr: &[f64]) -> Result<(Vec<f64>, ActivationTrace)> {
        let x0 = self.embed_input(obs, instr)?;
        let mut states = Vec::with_capacity(self.depth() + 1);
        states.push(x0);
        for block in &self.blocks {
            let next = block.forward(states.last().unwrap());
            states.push(next);
        }
        let trace = ActivationTrace { states };
        Ok((self.head_output(trace.last()), trace))
    }

    pub fn forward(&self, obs: &[f64], instr: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_recorded(obs, instr)?.0)
    }

    /// Forward pass with the blocks for which `bypass(i)` holds replaced by the
    /// identity.
    pub fn forward_bypassing(&self, obs: &[f64], instr: &[f64], bypass: impl Fn(usize) -> bool) -> Result<Vec<f64>> {
        let mut x = self.embed_input(obs, instr)?;
        for (i, block) in self.blocks.iter().enumerate() {
            if !bypass(i) {
                x = block.forward(&x);
            }
        }
        Ok(self.head_output(&x))
    }

    /// Mean squared error over batch and action dimensions, with gradients for
    /// every parameter.
    pub fn task_loss_and_grads(&self, batch: &[Sample]) -> Result<(f64, PolicyModel)> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut grads = self.zeros_like();
        let scale = 1.0 / (batch.len() * self.config.action_dim) as f64;
        let mut total = 0.0;
        let d = self.hidden();
        let mut hiddens = vec![vec![0.0; d]; self.depth()];
        for sample in batch {
            self.check_inputs(&sample.obs, &sample.instr)?;
            if sample.target.len() != self.config.action_dim {
                return Err(Error::Shape("target length".into()));
            }
            let mut input = sample.obs.clone();
            input.extend_from_slice(&sample.instr);
            let mut states = Vec::with_capacity(self.depth() + 1);
            states.push(self.embed.apply(&input));
            for (block, hidden) in self.blocks.iter().zip(hiddens.iter_mut()) {
                let mut y = vec![0.0; d];
                block.forward_cached(states.last().unwrap(), hidden, &mut y);
                states.push(y);
            }
            let action = self.head.apply(states.last().unwrap());
            let mut gaction = vec![0.0; action.len()];
            for (k, (a, t)) in action.iter().zip(&sample.target).enumerate() {
                let diff = a - t;
                total += diff * diff;
                gaction[k] = 2.0 * diff * scale;
            }
            let mut gx = vec![0.0; d];
            self.head
                .backward(states.last().unwrap(), &gaction, Some(&mut gx), Some(&mut grads.head));
            for i in (0..self.depth()).rev() {
                gx = self.blocks[i].backward(&states[i], &hiddens[i], &gx, Some(&mut grads.blocks[i]));
            }
            self.embed.backward(&input, &gx, None, Some(&mut grads.embed));
        }
        Ok((total * scale, grads))
    }

    pub fn mse(&self, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Usage("empty evaluation set".into()));
        }
        let mut total = 0.0;
        for s in samples {
            let a = self.forward(&s.obs, &s.instr)?;
            total += a.iter().zip(&s.target).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        Ok(total / (samples.len() * self.config.action_dim) as f64)
    }
}

impl Parameters for PolicyModel {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.embed.visit(f);
        for b in &self.blocks {
            b.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.embed.visit_mut(f);
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
        self.head.visit_mut(f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr`; cosine decay in between.
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4000,
            batch_size: 64,
            lr: 2e-3,
            lr_floor: 0.05,
            seed: 1,
        }
    }
}

pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Behavior cloning with Adam over shuffled minibatches. Returns the
/// per-step training loss.
pub fn train_behavior_cloning(model: &mut PolicyModel, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimState::new(model.num_params(), cfg.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for step in 0..cfg.steps {
        batch.clear();
        while batch.len() < cfg.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(data[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, grads) = model.task_loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: "behavior cloning loss".into(),
            });
        }
        opt.lr = cosine_lr(cfg.lr, cfg.lr_floor, step, cfg.steps);
        opt.step_params(model, &grads)?;
        losses.push(loss);
    }
    Ok(losses)
}

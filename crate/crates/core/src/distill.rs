//! Two-stage training of the skip modules against a frozen backbone.
//!
//! Stage 1 regresses every adapter onto the output of the layers it replaces.
//! Stage 2 trains adapters and controllers together: per sample, one dynamic
//! layer is drawn in each segment, its controller gate blends the adapter with
//! the real remaining layers, and a penalty proportional to the number of
//! layers kept pushes the gates open.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, OptimState, Parameters};
use crate::policy::{cosine_lr, PolicyModel, ResidualMlp, Sample};
use crate::profiler::Segment;
use crate::runtime::{forward_skipped, Gating, SkipConfig, SkipModules};

/// How the blended layer of a segment is drawn in stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// `P(r) ∝ 1/r` over offsets `r = 1..m` from the segment start.
    #[default]
    Harmonic,
    /// `P(r) ∝ m - r + 1`.
    Linear,
}

impl std::str::FromStr for Selection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "harmonic" => Ok(Selection::Harmonic),
            "linear" => Ok(Selection::Linear),
            other => Err(Error::config("distill.selection", format!("unknown selection `{other}`"))),
        }
    }
}

/// Offset probabilities for a segment with `m` dynamic layers.
pub fn selection_probs(m: usize, selection: Selection) -> Vec<f64> {
    let raw: Vec<f64> = (1..=m)
        .map(|r| match selection {
            Selection::Harmonic => 1.0 / r as f64,
            Selection::Linear => (m - r + 1) as f64,
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Draw one dynamic layer of `segment`.
pub fn sample_segment_layer<R: Rng + ?Sized>(segment: &Segment, selection: Selection, rng: &mut R) -> Result<usize> {
    if segment.is_empty() {
        return Err(Error::Usage(format!(
            "segment ending at layer {} has no dynamic layers",
            segment.static_layer
        )));
    }
    let probs = selection_probs(segment.len(), selection);
    let dist = WeightedIndex::new(&probs).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(segment.start + dist.sample(rng))
}

/// One selected layer per segment, `None` for segments without dynamic layers.
pub fn sample_selection<R: Rng + ?Sized>(segments: &[Segment], selection: Selection, rng: &mut R) -> Result<Vec<Option<usize>>> {
    segments
        .iter()
        .map(|s| {
            if s.is_empty() {
                Ok(None)
            } else {
                sample_segment_layer(s, selection, rng).map(Some)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Weight of the layers-kept penalty.
    pub lambda: f64,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub selection: Selection,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.0007,
            stage1_lr: 2e-3,
            stage2_lr: 1e-3,
            stage1_steps: 1500,
            stage2_steps: 2500,
            batch_size: 32,
            selection: Selection::Harmonic,
            seed: 7,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("distill.lambda", "must be a finite value >= 0"));
        }
        for (key, v) in [("distill.stage1_lr", self.stage1_lr), ("distill.stage2_lr", self.stage2_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        for (key, v) in [
            ("distill.stage1_steps", self.stage1_steps),
            ("distill.stage2_steps", self.stage2_steps),
            ("distill.batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// Squared distance between every adapter's output and the backbone state it
/// replaces, summed over dynamic layers and averaged over the batch.
pub fn stage1_loss(model: &PolicyModel, mods: &SkipModules, batch: &[Sample]) -> Result<f64> {
    stage1_impl(model, mods, batch, None)
}

pub fn stage1_loss_and_grads(model: &PolicyModel, mods: &SkipModules, batch: &[Sample]) -> Result<(f64, SkipModules)> {
    let mut grads = mods.zeros_like();
    let loss = stage1_impl(model, mods, batch, Some(&mut grads))?;
    Ok((loss, grads))
}

fn stage1_impl(model: &PolicyModel, mods: &SkipModules, batch: &[Sample], mut grads: Option<&mut SkipModules>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let d = model.hidden();
    let mut total = 0.0;
    for sample in batch {
        let (_, trace) = model.forward_recorded(&sample.obs, &sample.instr)?;
        for layer in mods.static_set.dynamic_layers() {
            let unit = mods.unit(layer).expect("dynamic layer has a unit");
            let target = &trace.states[mods.static_set.next_static(layer)];
            let x = &trace.states[layer];
            let mut hidden = vec![0.0; unit.adapter.inner()];
            let mut y = vec![0.0; d];
            unit.adapter.forward_cached(x, &mut hidden, &mut y);
            let mut gy = vec![0.0; d];
            for ((g, a), t) in gy.iter_mut().zip(&y).zip(target) {
                let r = a - t;
                total += r * r;
                *g = 2.0 * r * inv_b;
            }
            if let Some(g) = grads.as_deref_mut() {
                let gu = g.unit_mut(layer).expect("gradient unit");
                unit.adapter.backward(x, &hidden, &gy, Some(&mut gu.adapter));
            }
        }
    }
    Ok(total * inv_b)
}

/// Mean squared adapter residual per dynamic layer, `(layer, residual)`.
pub fn adapter_residuals(model: &PolicyModel, mods: &SkipModules, samples: &[Sample]) -> Result<Vec<(usize, f64)>> {
    let layers = mods.static_set.dynamic_layers();
    let mut sums = vec![0.0; layers.len()];
    for sample in samples {
        let (_, trace) = model.forward_recorded(&sample.obs, &sample.instr)?;
        for (sum, &layer) in sums.iter_mut().zip(&layers) {
            let y = mods.unit(layer).unwrap().adapter.forward(&trace.states[layer]);
            let target = &trace.states[mods.static_set.next_static(layer)];
            *sum += y.iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum::<f64>();
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(layers.into_iter().zip(sums).map(|(l, s)| (l, s / n)).collect())
}

struct BlockCache {
    layer: usize,
    x: Vec<f64>,
    hidden: Vec<f64>,
}

fn run_block(block: &ResidualMlp, layer: usize, x: Vec<f64>) -> (Vec<f64>, BlockCache) {
    let mut hidden = vec![0.0; block.inner()];
    let mut y = vec![0.0; block.dim()];
    block.forward_cached(&x, &mut hidden, &mut y);
    (y, BlockCache { layer, x, hidden })
}

struct BlendCache {
    layer: usize,
    static_layer: usize,
    x: Vec<f64>,
    ctrl_hidden: Vec<f64>,
    gate: f64,
    adapter_hidden: Vec<f64>,
    adapter_out: Vec<f64>,
    path: Vec<BlockCache>,
    path_out: Vec<f64>,
}

struct SegmentCache {
    forced: Vec<BlockCache>,
    blend: Option<BlendCache>,
    static_block: BlockCache,
}

struct BlendPass {
    last: Vec<f64>,
    action: Vec<f64>,
    segments: Vec<SegmentCache>,
}

fn blend_pass(model: &PolicyModel, mods: &SkipModules, selected: &[Option<usize>], obs: &[f64], instr: &[f64]) -> Result<BlendPass> {
    let segments = mods.segments();
    if selected.len() != segments.len() {
        return Err(Error::Shape(format!(
            "{} selections for {} segments",
            selected.len(),
            segments.len()
        )));
    }
    let mut x = model.embed_input(obs, instr)?;
    let mut caches = Vec::with_capacity(segments.len());
    for (seg, sel) in segments.iter().zip(selected) {
        let blend_at = match *sel {
            Some(i) if seg.dynamic_layers().contains(&i) => Some(i),
            None if seg.is_empty() => None,
            _ => {
                return Err(Error::Usage(format!(
                    "selection {sel:?} invalid for segment {}..{}",
                    seg.start, seg.static_layer
                )))
            }
        };
        let mut forced = Vec::new();
        let mut blend = None;
        if let Some(i) = blend_at {
            for l in seg.start..i {
                let (y, c) = run_block(&model.blocks[l], l, x);
                forced.push(c);
                x = y;
            }
            let unit = mods.unit(i).expect("dynamic layer has a unit");
            let mut ctrl_hidden = vec![0.0; unit.controller.inner()];
            let gate = unit.controller.forward_cached(&x, &mut ctrl_hidden);
            let mut adapter_hidden = vec![0.0; unit.adapter.inner()];
            let mut adapter_out = vec![0.0; x.len()];
            unit.adapter.forward_cached(&x, &mut adapter_hidden, &mut adapter_out);
            let mut path = Vec::new();
            let mut f = x.clone();
            for l in i..seg.static_layer {
                let (y, c) = run_block(&model.blocks[l], l, f);
                path.push(c);
                f = y;
            }
            let mixed: Vec<f64> = adapter_out
                .iter()
                .zip(&f)
                .map(|(a, p)| gate * a + (1.0 - gate) * p)
                .collect();
            blend = Some(BlendCache {
                layer: i,
                static_layer: seg.static_layer,
                x,
                ctrl_hidden,
                gate,
                adapter_hidden,
                adapter_out,
                path,
                path_out: f,
            });
            x = mixed;
        }
        let (y, static_block) = run_block(&model.blocks[seg.static_layer], seg.static_layer, x);
        x = y;
        caches.push(SegmentCache {
            forced,
            blend,
            static_block,
        });
    }
    let action = model.head_output(&x);
    Ok(BlendPass {
        last: x,
        action,
        segments: caches,
    })
}

/// Differentiable relaxation of a skip decision: within each segment the
/// layers before the selected one run normally, then
/// `x_s = g·adapter(x_i) + (1 - g)·layers_{i..s-1}(x_i)` feeds the static
/// layer. Returns the action and the gate of every non-empty segment.
pub fn stage2_blend_forward(
    model: &PolicyModel,
    mods: &SkipModules,
    selected: &[Option<usize>],
    obs: &[f64],
    instr: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let pass = blend_pass(model, mods, selected, obs, instr)?;
    let gates = pass.segments.iter().filter_map(|s| s.blend.as_ref().map(|b| b.gate)).collect();
    Ok((pass.action, gates))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stage2Loss {
    pub total: f64,
    /// Mean squared action error.
    pub task: f64,
    /// `Σ (1 - g)(s - i)` averaged over the batch, before weighting.
    pub norm: f64,
    pub mean_gate: f64,
}

/// Stage-2 loss for a batch with explicit per-sample selections.
pub fn stage2_loss(model: &PolicyModel, mods: &SkipModules, batch: &[Sample], selections: &[Vec<Option<usize>>], lambda: f64) -> Result<Stage2Loss> {
    stage2_impl(model, mods, batch, selections, lambda, None)
}

pub fn stage2_loss_and_grads(
    model: &PolicyModel,
    mods: &SkipModules,
    batch: &[Sample],
    selections: &[Vec<Option<usize>>],
    lambda: f64,
) -> Result<(Stage2Loss, SkipModules)> {
    let mut grads = mods.zeros_like();
    let loss = stage2_impl(model, mods, batch, selections, lambda, Some(&mut grads))?;
    Ok((loss, grads))
}

fn stage2_impl(
    model: &PolicyModel,
    mods: &SkipModules,
    batch: &[Sample],
    selections: &[Vec<Option<usize>>],
    lambda: f64,
    mut grads: Option<&mut SkipModules>,
) -> Result<Stage2Loss> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    if selections.len() != batch.len() {
        return Err(Error::Shape(format!("{} selections for {} samples", selections.len(), batch.len())));
    }
    let inv_b = 1.0 / batch.len() as f64;
    let scale = inv_b / model.config.action_dim as f64;
    let mut task = 0.0;
    let mut norm = 0.0;
    let mut gate_sum = 0.0;
    let mut gate_count = 0usize;
    for (sample, sel) in batch.iter().zip(selections) {
        if sample.target.len() != model.config.action_dim {
            return Err(Error::Shape("target length".into()));
        }
        let pass = blend_pass(model, mods, sel, &sample.obs, &sample.instr)?;
        let mut gaction = vec![0.0; pass.action.len()];
        for (g, (a, t)) in gaction.iter_mut().zip(pass.action.iter().zip(&sample.target)) {
            let diff = a - t;
            task += diff * diff;
            *g = 2.0 * diff * scale;
        }
        for b in pass.segments.iter().filter_map(|s| s.blend.as_ref()) {
            norm += (1.0 - b.gate) * (b.static_layer - b.layer) as f64;
            gate_sum += b.gate;
            gate_count += 1;
        }
        let Some(grads) = grads.as_deref_mut() else {
            continue;
        };
        let mut gx = vec![0.0; pass.last.len()];
        model.head.backward(&pass.last, &gaction, Some(&mut gx), None);
        for seg in pass.segments.iter().rev() {
            let sb = &seg.static_block;
            gx = model.blocks[sb.layer].backward(&sb.x, &sb.hidden, &gx, None);
            if let Some(b) = &seg.blend {
                let unit = mods.unit(b.layer).expect("dynamic layer has a unit");
                let gunit = grads.unit_mut(b.layer).expect("gradient unit");
                let ga: Vec<f64> = gx.iter().map(|v| b.gate * v).collect();
                let mut gp: Vec<f64> = gx.iter().map(|v| (1.0 - b.gate) * v).collect();
                let diff: Vec<f64> = b.adapter_out.iter().zip(&b.path_out).map(|(a, f)| a - f).collect();
                let ggate = dot(&gx, &diff) - lambda * (b.static_layer - b.layer) as f64 * inv_b;
                let mut gxi = unit.adapter.backward(&b.x, &b.adapter_hidden, &ga, Some(&mut gunit.adapter));
                for c in b.path.iter().rev() {
                    gp = model.blocks[c.layer].backward(&c.x, &c.hidden, &gp, None);
                }
                let gc = unit
                    .controller
                    .backward(&b.x, &b.ctrl_hidden, b.gate, ggate, Some(&mut gunit.controller));
                for ((v, p), c) in gxi.iter_mut().zip(&gp).zip(&gc) {
                    *v += p + c;
                }
                gx = gxi;
            }
            for c in seg.forced.iter().rev() {
                gx = model.blocks[c.layer].backward(&c.x, &c.hidden, &gx, None);
            }
        }
    }
    let task = task * scale;
    let norm = norm * inv_b;
    Ok(Stage2Loss {
        total: task + lambda * norm,
        task,
        norm,
        mean_gate: if gate_count == 0 { 0.0 } else { gate_sum / gate_count as f64 },
    })
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub task_loss: f64,
    pub norm_loss: f64,
    /// Absent in stage 1, where no controller runs.
    pub mean_gate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub log: Vec<StepLog>,
    /// `(layer, mean squared residual)` on the evaluation samples.
    pub adapter_residuals: Vec<(usize, f64)>,
    /// `(layer, mean gate)` on the evaluation samples.
    pub controller_gates: Vec<(usize, f64)>,
    /// Fraction of dynamic layers skipped with every controller active.
    pub skip_rate: f64,
}

impl StageReport {
    pub fn initial_loss(&self) -> f64 {
        self.log.first().map_or(f64::NAN, |l| l.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.log.last().map_or(f64::NAN, |l| l.loss)
    }

    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,loss,task_loss,norm_loss,mean_gate\n");
        for l in &self.log {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.step,
                l.loss,
                l.task_loss,
                l.norm_loss,
                l.mean_gate.map_or(String::new(), |g| g.to_string())
            ));
        }
        out
    }
}

/// Minibatch stream over a shuffled dataset.
struct Batcher<'a> {
    data: &'a [Sample],
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Batcher<'a> {
    fn new(data: &'a [Sample], rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        Batcher { data, order, cursor: 0 }
    }

    fn next(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size.min(self.data.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            batch.push(self.data[self.order[self.cursor]].clone());
            self.cursor += 1;
        }
        batch
    }
}

fn mean_gates(mods: &SkipModules, model: &PolicyModel, samples: &[Sample]) -> Result<Vec<(usize, f64)>> {
    let layers = mods.static_set.dynamic_layers();
    let mut sums = vec![0.0; layers.len()];
    for s in samples {
        let (_, trace) = model.forward_recorded(&s.obs, &s.instr)?;
        for (sum, &l) in sums.iter_mut().zip(&layers) {
            *sum += mods.unit(l).unwrap().controller.forward(&trace.states[l]);
        }
    }
    let n = samples.len().max(1) as f64;
    Ok(layers.into_iter().zip(sums).map(|(l, s)| (l, s / n)).collect())
}

/// Fraction of dynamic layers not executed when every controller is active
/// from its segment start.
pub fn skip_rate(model: &PolicyModel, mods: &SkipModules, samples: &[Sample]) -> Result<f64> {
    let allow: Vec<usize> = mods.segments().iter().map(|s| s.start).collect();
    let dynamic = mods.num_dynamic();
    if dynamic == 0 || samples.is_empty() {
        return Ok(0.0);
    }
    let statics = mods.static_set.layers().len();
    let mut skipped = 0usize;
    for s in samples {
        let (_, t) = forward_skipped(model, mods, &s.obs, &s.instr, Gating::Controllers { allow: &allow })?;
        skipped += dynamic - (t.executed.len() - statics);
    }
    Ok(skipped as f64 / (dynamic * samples.len()) as f64)
}

fn report(stage: &str, log: Vec<StepLog>, model: &PolicyModel, mods: &SkipModules, eval: &[Sample]) -> Result<StageReport> {
    Ok(StageReport {
        stage: stage.to_string(),
        log,
        adapter_residuals: adapter_residuals(model, mods, eval)?,
        controller_gates: mean_gates(mods, model, eval)?,
        skip_rate: skip_rate(model, mods, eval)?,
    })
}

fn diverged(step: usize, what: &str, value: f64) -> Error {
    Error::Diverged {
        step,
        detail: format!("{what} loss became {value}"),
    }
}

/// Stage 1 only: adapter regression.
pub fn run_stage1(model: &PolicyModel, mods: &mut SkipModules, data: &[Sample], eval: &[Sample], cfg: &DistillConfig) -> Result<StageReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("empty distillation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut batcher = Batcher::new(data, &mut rng);
    let mut opt = OptimState::new(mods.num_params(), cfg.stage1_lr);
    let mut log = Vec::with_capacity(cfg.stage1_steps);
    for step in 0..cfg.stage1_steps {
        let batch = batcher.next(cfg.batch_size, &mut rng);
        let (loss, grads) = stage1_loss_and_grads(model, mods, &batch)?;
        if !loss.is_finite() {
            return Err(diverged(step, "stage 1", loss));
        }
        opt.lr = cosine_lr(cfg.stage1_lr, 0.1, step, cfg.stage1_steps);
        opt.step_params(mods, &grads)?;
        log.push(StepLog {
            step,
            loss,
            task_loss: loss,
            norm_loss: 0.0,
            mean_gate: None,
        });
    }
    report("stage1", log, model, mods, eval)
}

/// Stage 2 for `steps` steps: adapters and controllers on the blended loss.
pub fn run_stage2(
    model: &PolicyModel,
    mods: &mut SkipModules,
    data: &[Sample],
    eval: &[Sample],
    cfg: &DistillConfig,
    steps: usize,
    stage: &str,
) -> Result<StageReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Usage("empty distillation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut batcher = Batcher::new(data, &mut rng);
    let segments = mods.segments();
    let mut opt = OptimState::new(mods.num_params(), cfg.stage2_lr);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = batcher.next(cfg.batch_size, &mut rng);
        let selections = batch
            .iter()
            .map(|_| sample_selection(&segments, cfg.selection, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = stage2_loss_and_grads(model, mods, &batch, &selections, cfg.lambda)?;
        if !loss.total.is_finite() {
            return Err(diverged(step, stage, loss.total));
        }
        opt.lr = cosine_lr(cfg.stage2_lr, 0.1, step, steps);
        opt.step_params(mods, &grads)?;
        log.push(StepLog {
            step,
            loss: loss.total,
            task_loss: loss.task,
            norm_loss: loss.norm,
            mean_gate: Some(loss.mean_gate),
        });
    }
    report(stage, log, model, mods, eval)
}

/// Stage 1 followed by stage 2, starting from `mods`.
pub fn run_two_stage(
    model: &PolicyModel,
    mut mods: SkipModules,
    data: &[Sample],
    eval: &[Sample],
    cfg: &DistillConfig,
) -> Result<(SkipModules, Vec<StageReport>)> {
    let r1 = run_stage1(model, &mut mods, data, eval, cfg)?;
    let r2 = run_stage2(model, &mut mods, data, eval, cfg, cfg.stage2_steps, "stage2")?;
    Ok((mods, vec![r1, r2]))
}

/// Ablation: stage 2 only, from random initialization, for the same total
/// number of steps as the two-stage schedule.
pub fn run_joint_from_scratch(
    model: &PolicyModel,
    static_set: crate::profiler::StaticSet,
    skip: SkipConfig,
    data: &[Sample],
    eval: &[Sample],
    cfg: &DistillConfig,
) -> Result<(SkipModules, StageReport)> {
    let mut mods = SkipModules::init(model, static_set, skip)?;
    let steps = cfg.stage1_steps + cfg.stage2_steps;
    let r = run_stage2(model, &mut mods, data, eval, cfg, steps, "joint")?;
    Ok((mods, r))
}

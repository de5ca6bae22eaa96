//! Layer informativeness analysis and static-layer selection.
//!
//! Informative layers are the ones whose output differs most from their input
//! (low input/output cosine similarity). Those are kept unconditionally; the
//! rest become skippable dynamic layers grouped into segments that each end at
//! a static layer.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Parameters};
use crate::policy::{PolicyModel, Sample};
use crate::sim::{self, Action, EnvState, Phase, SimConfig, Task};

/// Sorted static layer ids. The final block is always a member so every
/// dynamic layer has a jump target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticSet {
    depth: usize,
    layers: Vec<usize>,
}

/// Dynamic layers `start..static_layer`, followed by `static_layer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub static_layer: usize,
}

impl Segment {
    pub fn dynamic_layers(&self) -> std::ops::Range<usize> {
        self.start..self.static_layer
    }

    pub fn len(&self) -> usize {
        self.static_layer - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.static_layer
    }
}

impl StaticSet {
    pub fn new(depth: usize, mut layers: Vec<usize>) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() {
            return Err(Error::config("static_set", "must not be empty"));
        }
        if *layers.last().unwrap() != depth - 1 {
            return Err(Error::config("static_set", "must contain the final block"));
        }
        Ok(StaticSet { depth, layers })
    }

    /// Every block static: skipping disabled.
    pub fn all(depth: usize) -> Self {
        StaticSet {
            depth,
            layers: (0..depth).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.binary_search(&layer).is_ok()
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut start = 0;
        self.layers
            .iter()
            .map(|&s| {
                let seg = Segment { start, static_layer: s };
                start = s + 1;
                seg
            })
            .collect()
    }

    pub fn dynamic_layers(&self) -> Vec<usize> {
        (0..self.depth).filter(|l| !self.contains(*l)).collect()
    }

    /// The static layer closing the segment that holds `layer`.
    pub fn next_static(&self, layer: usize) -> usize {
        let idx = self.layers.partition_point(|&s| s < layer);
        self.layers[idx]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    /// `pairwise[i][j]`: mean similarity of the outputs of blocks `i` and `j`.
    pub pairwise: Vec<Vec<f64>>,
    /// Mean similarity between each block's input and output.
    pub io_similarity: Vec<f64>,
    pub samples: usize,
    /// Activations dropped from the means because they had zero norm.
    pub excluded: usize,
}

pub fn profile_layers(model: &PolicyModel, inputs: &[Sample]) -> Result<LayerProfile> {
    if inputs.is_empty() {
        return Err(Error::Usage("profiling needs at least one input".into()));
    }
    let n = model.depth();
    let mut pair_sum = vec![vec![0.0; n]; n];
    let mut pair_count = vec![vec![0usize; n]; n];
    let mut io_sum = vec![0.0; n];
    let mut io_count = vec![0usize; n];
    let mut excluded = 0;
    for s in inputs {
        let (_, trace) = model.forward_recorded(&s.obs, &s.instr)?;
        for i in 0..n {
            match cosine_similarity(&trace.states[i], &trace.states[i + 1]) {
                Ok(c) => {
                    io_sum[i] += c;
                    io_count[i] += 1;
                }
                Err(Error::Degenerate(_)) => excluded += 1,
                Err(e) => return Err(e),
            }
            for j in i..n {
                match cosine_similarity(&trace.states[i + 1], &trace.states[j + 1]) {
                    Ok(c) => {
                        pair_sum[i][j] += c;
                        pair_count[i][j] += 1;
                    }
                    Err(Error::Degenerate(_)) => excluded += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if excluded > 0 {
        warn!("{excluded} zero-norm activations excluded from the layer profile");
    }
    let mut pairwise = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            if pair_count[i][j] == 0 {
                return Err(Error::Degenerate(format!("no usable activations for layers {i},{j}")));
            }
            let v = if i == j { 1.0 } else { pair_sum[i][j] / pair_count[i][j] as f64 };
            pairwise[i][j] = v;
            pairwise[j][i] = v;
        }
    }
    let io_similarity = io_sum
        .iter()
        .zip(&io_count)
        .enumerate()
        .map(|(i, (s, c))| {
            if *c == 0 {
                Err(Error::Degenerate(format!("no usable activations for layer {i}")))
            } else {
                Ok(s / *c as f64)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LayerProfile {
        pairwise,
        io_similarity,
        samples: inputs.len(),
        excluded,
    })
}

/// The `ceil(ratio * N)` layers with the lowest input/output similarity, plus
/// the final block. Ties go to the lower index.
pub fn select_static(profile: &LayerProfile, ratio: f64) -> Result<StaticSet> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::config("static_ratio", "must be in (0, 1]"));
    }
    let n = profile.io_similarity.len();
    // Guard against 0.2 * 15 = 3.0000000000000004 style rounding.
    let count = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        profile.io_similarity[a]
            .total_cmp(&profile.io_similarity[b])
            .then(a.cmp(&b))
    });
    let mut layers: Vec<usize> = order.into_iter().take(count.min(n)).collect();
    layers.push(n - 1);
    StaticSet::new(n, layers)
}

/// Task-loss increase when each block alone is replaced by the identity.
pub fn zero_shot_sensitivity(model: &PolicyModel, eval: &[Sample]) -> Result<Vec<f64>> {
    let base = model.mse(eval)?;
    (0..model.depth())
        .map(|layer| {
            let mut total = 0.0;
            for s in eval {
                let a = model.forward_bypassing(&s.obs, &s.instr, |i| i == layer)?;
                total += a.iter().zip(&s.target).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
            }
            Ok(total / (eval.len() * model.config.action_dim) as f64 - base)
        })
        .collect()
}

/// Spearman rank correlation; ties get their average rank.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].total_cmp(&v[y]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Steps during which weight noise is injected. Without a phase the range is
/// over episode steps, `start <= step < end`. With a phase it is over offsets
/// into every contiguous run of that phase, so both phases can be given the
/// same number of noisy steps per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseWindow {
    pub start: usize,
    pub end: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<Phase>,
}

impl NoiseWindow {
    fn covers(&self, step: usize, phase: Phase, run_offset: usize) -> bool {
        match self.phase {
            None => (self.start..self.end).contains(&step),
            Some(p) => p == phase && (self.start..self.end).contains(&run_offset),
        }
    }

    pub fn label(&self) -> &'static str {
        match self.phase {
            None => "ALL",
            Some(Phase::Free) => "FREE",
            Some(Phase::Fine) => "FINE",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub window: NoiseWindow,
    pub sigma: f64,
    pub completion_rate: f64,
    pub trials: usize,
}

/// Closed-loop full-model rollout where, on covered steps, every block weight
/// receives fresh i.i.d. Gaussian noise of std `sigma` for that forward pass
/// only. Returns whether the whole chain was completed.
pub fn noisy_rollout(task: &Task, sim_cfg: &SimConfig, model: &PolicyModel, window: &NoiseWindow, sigma: f64, noise_seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut noisy = model.clone();
    let mut state = EnvState::initial(task);
    let mut run: Option<(Phase, usize)> = None;
    while !state.done(task) {
        let obs = sim::observe(task, &state);
        let instr = sim::instruction(task, &state);
        let phase = sim::phase(task, &state);
        let run_start = match run {
            Some((p, start)) if p == phase => start,
            _ => state.step,
        };
        run = Some((phase, run_start));
        let perturb = sigma > 0.0 && window.covers(state.step, phase, state.step - run_start);
        let out = if perturb {
            for (nb, b) in noisy.blocks.iter_mut().zip(&model.blocks) {
                let mut src = b.to_flat().into_iter();
                nb.visit_mut(&mut |s| {
                    for v in s.iter_mut() {
                        *v = src.next().unwrap() + normal.sample(&mut rng);
                    }
                });
            }
            noisy.forward(&obs, &instr)?
        } else {
            model.forward(&obs, &instr)?
        };
        match sim::env_step(task, sim_cfg, &state, Action::from_policy(&out, sim_cfg)) {
            Ok((next, _)) => state = next,
            Err(_) => return Ok(false),
        }
    }
    Ok(sim::score_rollout(task, &state.completed).success)
}

/// Completion rate of closed-loop rollouts for every `(window, sigma)` cell.
/// Trial `j` of every cell uses task seed `task_seeds[j]`, so cells are
/// paired and `sigma = 0` reproduces the clean rollouts exactly.
pub fn noise_importance(
    sim_cfg: &SimConfig,
    model: &PolicyModel,
    windows: &[NoiseWindow],
    sigmas: &[f64],
    task_seeds: &[u64],
    noise_seed: u64,
) -> Result<Vec<NoiseCell>> {
    if task_seeds.is_empty() {
        return Err(Error::Usage("noise study needs at least one trial".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
        return Err(Error::config("noise.sigmas", format!("{s} is not a finite value >= 0")));
    }
    let tasks = task_seeds
        .iter()
        .map(|&s| sim::sample_task_sequence(s, sim_cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(windows.len() * sigmas.len());
    for (wi, window) in windows.iter().enumerate() {
        for (si, &sigma) in sigmas.iter().enumerate() {
            let outcomes = tasks
                .par_iter()
                .enumerate()
                .map(|(j, task)| {
                    let seed = noise_seed ^ ((wi as u64) << 40) ^ ((si as u64) << 20) ^ j as u64;
                    noisy_rollout(task, sim_cfg, model, window, sigma, seed)
                })
                .collect::<Result<Vec<bool>>>()?;
            let done = outcomes.iter().filter(|o| **o).count();
            cells.push(NoiseCell {
                window: *window,
                sigma,
                completion_rate: done as f64 / outcomes.len() as f64,
                trials: outcomes.len(),
            });
        }
    }
    Ok(cells)
}

pub fn noise_csv(cells: &[NoiseCell]) -> String {
    let mut out = String::from("range_start,range_end,phase,sigma,completion_rate,trials\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.window.start,
            c.window.end,
            c.window.label(),
            c.sigma,
            c.completion_rate,
            c.trials
        ));
    }
    out
}

pub fn profile_io_csv(profile: &LayerProfile) -> String {
    let mut out = String::from("layer,io_similarity\n");
    for (i, v) in profile.io_similarity.iter().enumerate() {
        out.push_str(&format!("{i},{v}\n"));
    }
    out
}

pub fn profile_pairs_csv(profile: &LayerProfile) -> String {
    let mut out = String::from("i,j,similarity\n");
    for (i, row) in profile.pairwise.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            out.push_str(&format!("{i},{j},{v}\n"));
        }
    }
    out
}

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::exec::{forward_skipped, ExecTrace, Gating};
use super::guidance::{DeltaLMode, GuidanceState};
use super::SkipModules;
use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::policy::PolicyModel;
use crate::sim::{self, Action, EnvState, Phase, Score, SimConfig, Task};

/// Keeps the random-skip stream apart from other users of the task seed.
const RANDOM_SKIP_STREAM: u64 = 0x7a3d_51c9_0e28_b64f;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Every block on every step.
    Full,
    /// Controllers, moving allow points and verification.
    Dysl,
    /// Controllers with allow points pinned at segment starts and no
    /// verification.
    ControllersOnly,
    /// Dynamic layers jump with a fixed probability; no controllers.
    RandomSkip,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Full, Mode::Dysl, Mode::ControllersOnly, Mode::RandomSkip];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Dysl => "dysl",
            Mode::ControllersOnly => "controllers-only",
            Mode::RandomSkip => "random-skip",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Usage(format!("unknown mode `{s}` (expected full, dysl, controllers-only, random-skip)")))
    }
}

impl Serialize for Mode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Mode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Continuity window length.
    pub k: usize,
    /// Dead band of the allow-point update.
    pub eta: f64,
    /// Drop threshold of the verification trigger; `eta` when absent.
    pub eta_verify: Option<f64>,
    pub delta_l: DeltaLMode,
    /// Per-layer bypass probability of random skipping.
    pub random_prob: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            k: 5,
            eta: 0.14,
            eta_verify: None,
            delta_l: DeltaLMode::Adaptive,
            random_prob: 0.0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("runtime.k", "must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config("runtime.eta", "must be positive"));
        }
        if let Some(v) = self.eta_verify {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config("runtime.eta_verify", "must be positive"));
            }
        }
        if !(0.0..=1.0).contains(&self.random_prob) {
            return Err(Error::config("runtime.random_prob", "must be in [0, 1]"));
        }
        Ok(())
    }

    pub fn verify_threshold(&self) -> f64 {
        self.eta_verify.unwrap_or(self.eta)
    }
}

/// One line of the per-episode trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub executed_layers: Vec<usize>,
    /// Layer ids whose controller ran, in order.
    pub controllers_evaluated: Vec<usize>,
    pub gates: Vec<f64>,
    pub adapters: Vec<usize>,
    pub skipped_segments: Vec<usize>,
    #[serde(rename = "C_t")]
    pub c_t: f64,
    /// Allow points in force when the step ran.
    pub allow_points: Vec<usize>,
    pub verified: bool,
    pub flops: u64,
    pub warmup: bool,
    /// Expert phase label of the state, for analysis only.
    pub phase: Phase,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub discarded: Option<ExecTrace>,
}

impl StepRecord {
    fn new(step: usize, trace: ExecTrace, c_t: f64, allow_points: Vec<usize>, warmup: bool, phase: Phase) -> Self {
        let (controllers_evaluated, gates) = trace.controllers.iter().copied().unzip();
        StepRecord {
            step,
            executed_layers: trace.executed,
            controllers_evaluated,
            gates,
            adapters: trace.adapters,
            skipped_segments: trace.skipped_segments,
            c_t,
            allow_points,
            verified: trace.verified,
            flops: trace.flops,
            warmup,
            phase,
            discarded: trace.discarded.map(|b| *b),
        }
    }

    /// Rebuild the execution trace for independent FLOP accounting.
    pub fn to_trace(&self) -> ExecTrace {
        ExecTrace {
            executed: self.executed_layers.clone(),
            adapters: self.adapters.clone(),
            controllers: self.controllers_evaluated.iter().copied().zip(self.gates.iter().copied()).collect(),
            skipped_segments: self.skipped_segments.clone(),
            verified: self.verified,
            flops: self.flops,
            discarded: self.discarded.clone().map(Box::new),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub mode: Mode,
    pub score: Score,
    pub completed: Vec<bool>,
    pub steps: Vec<StepRecord>,
    /// Set when the rollout stopped on an environment error.
    pub diagnostic: Option<String>,
}

impl Episode {
    pub fn mean_executed_layers(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.executed_layers.len() as f64))
    }

    pub fn mean_flops(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.flops as f64))
    }

    pub fn verify_count(&self) -> usize {
        self.steps.iter().filter(|s| s.verified).count()
    }

    pub fn controller_evals(&self) -> usize {
        self.steps.iter().map(|s| s.controllers_evaluated.len()).sum()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Policy output clamped to the unit action box, the space continuity is
/// measured in.
fn unit_action(output: &[f64]) -> Vec<f64> {
    output.iter().map(|v| v.clamp(-1.0, 1.0)).collect()
}

/// Per-episode inference state: guidance, verification and the random-skip
/// stream. Each call to [`Session::step`] predicts one action.
#[derive(Debug, Clone)]
pub struct Session {
    cfg: RolloutConfig,
    mode: Mode,
    pinned: Vec<usize>,
    guidance: GuidanceState,
    rng: ChaCha8Rng,
}

/// Result of one [`Session::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Raw policy output in unit action scale.
    pub action: Vec<f64>,
    pub trace: ExecTrace,
    pub c_t: f64,
    /// Allow points in force while the step ran.
    pub allow_points: Vec<usize>,
    pub warmup: bool,
}

impl Session {
    pub fn new(mods: &SkipModules, cfg: &RolloutConfig, mode: Mode, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let segments = mods.segments();
        let pinned = segments.iter().map(|s| s.start).collect();
        Ok(Session {
            cfg: *cfg,
            mode,
            pinned,
            guidance: GuidanceState::new(segments, cfg.k),
            rng: ChaCha8Rng::seed_from_u64(seed ^ RANDOM_SKIP_STREAM),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn guidance(&self) -> &GuidanceState {
        &self.guidance
    }

    pub fn step(&mut self, model: &PolicyModel, mods: &SkipModules, obs: &[f64], instr: &[f64]) -> Result<StepOutput> {
        let mode = self.mode;
        let warmup = mode != Mode::Full && self.guidance.in_warmup();
        let allow_now = match mode {
            Mode::Dysl => self.guidance.allow.points().to_vec(),
            Mode::ControllersOnly => self.pinned.clone(),
            _ => Vec::new(),
        };
        let gating = match mode {
            _ if warmup => Gating::Full,
            Mode::Full => Gating::Full,
            Mode::Dysl | Mode::ControllersOnly => Gating::Controllers { allow: &allow_now },
            Mode::RandomSkip => Gating::Random {
                prob: self.cfg.random_prob,
                rng: &mut self.rng,
            },
        };
        let (mut output, mut trace) = forward_skipped(model, mods, obs, instr, gating)?;
        let mut c_t = self.guidance.push_action(&unit_action(&output)).value;

        if mode == Mode::Dysl && !warmup {
            let eta_v = self.cfg.verify_threshold();
            if let Some(mut delta) = self.guidance.delta() {
                if self.guidance.gate.should_verify(delta, eta_v) {
                    let (full_out, rerun) = forward_skipped(model, mods, obs, instr, Gating::Full)?;
                    trace = trace.into_verified(rerun);
                    output = full_out;
                    c_t = self.guidance.replace_last(&unit_action(&output)).value;
                    delta = self.guidance.delta().unwrap_or(delta);
                }
                self.guidance.gate.settle(delta, eta_v);
                self.guidance.allow.update(delta, self.cfg.eta, self.cfg.delta_l);
            }
        }
        Ok(StepOutput {
            action: output,
            trace,
            c_t,
            allow_points: allow_now,
            warmup,
        })
    }
}

/// Closed-loop rollout of one task under `mode`. The episode is a pure
/// function of its arguments.
pub fn rollout_episode(
    task: &Task,
    sim_cfg: &SimConfig,
    model: &PolicyModel,
    mods: &SkipModules,
    cfg: &RolloutConfig,
    mode: Mode,
) -> Result<Episode> {
    let mut session = Session::new(mods, cfg, mode, task.seed)?;
    let mut state = EnvState::initial(task);
    let mut steps = Vec::new();
    let mut diagnostic = None;
    while !state.done(task) {
        let obs = sim::observe(task, &state);
        let instr = sim::instruction(task, &state);
        let phase = sim::phase(task, &state);
        let out = session.step(model, mods, &obs, &instr)?;
        let action = Action::from_policy(&out.action, sim_cfg);
        steps.push(StepRecord::new(state.step, out.trace, out.c_t, out.allow_points, out.warmup, phase));
        match sim::env_step(task, sim_cfg, &state, action) {
            Ok((next, _)) => state = next,
            Err(e) => {
                diagnostic = Some(e.to_string());
                state.failed = true;
            }
        }
    }
    Ok(Episode {
        seed: task.seed,
        mode,
        score: sim::score_rollout(task, &state.completed),
        completed: state.completed,
        steps,
        diagnostic,
    })
}

/// Expected per-step FLOPs when every dynamic layer is bypassed with
/// probability `q`.
pub fn expected_random_skip_flops(fm: &FlopModel, q: f64) -> f64 {
    let mut total = (fm.embed + fm.head) as f64;
    for seg in fm.static_set.segments() {
        for l in seg.dynamic_layers() {
            total += (1.0 - q) * fm.blocks[l] as f64;
        }
        total += fm.blocks[seg.static_layer] as f64;
    }
    total
}

/// Bypass probability whose expected cost matches `target_flops`, clamped to
/// `[0, 1]`.
pub fn calibrate_random_skip(fm: &FlopModel, target_flops: f64) -> f64 {
    let full = expected_random_skip_flops(fm, 0.0);
    let floor = expected_random_skip_flops(fm, 1.0);
    if full <= floor {
        return 0.0;
    }
    ((full - target_flops) / (full - floor)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;
    use crate::profiler::StaticSet;
    use crate::runtime::SkipConfig;
    use crate::sim::sample_task_sequence;

    fn setup() -> (PolicyModel, SkipModules) {
        let model = PolicyModel::build(PolicyConfig::default()).unwrap();
        let ss = StaticSet::new(12, vec![2, 5, 8, 11]).unwrap();
        let mods = SkipModules::init(&model, ss, SkipConfig::default()).unwrap();
        (model, mods)
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Mode>(&json).unwrap(), m);
        }
        assert_eq!("controllers_only".parse::<Mode>().unwrap(), Mode::ControllersOnly);
        assert!("turbo".parse::<Mode>().is_err());
    }

    #[test]
    fn full_mode_runs_every_layer_and_is_deterministic() {
        let (model, mods) = setup();
        let cfg = SimConfig {
            step_cap_per_subtask: 30,
            ..SimConfig::default()
        };
        let task = sample_task_sequence(4, &cfg).unwrap();
        let rc = RolloutConfig::default();
        let ep = rollout_episode(&task, &cfg, &model, &mods, &rc, Mode::Full).unwrap();
        assert!(!ep.steps.is_empty());
        assert!(ep.steps.iter().all(|s| s.executed_layers.len() == 12 && s.controllers_evaluated.is_empty()));
        for mode in Mode::ALL {
            let a = rollout_episode(&task, &cfg, &model, &mods, &rc, mode).unwrap();
            let b = rollout_episode(&task, &cfg, &model, &mods, &rc, mode).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }

    #[test]
    fn warmup_steps_never_skip() {
        let (model, mods) = setup();
        let cfg = SimConfig {
            step_cap_per_subtask: 20,
            ..SimConfig::default()
        };
        let task = sample_task_sequence(9, &cfg).unwrap();
        let rc = RolloutConfig {
            random_prob: 1.0,
            ..RolloutConfig::default()
        };
        let ep = rollout_episode(&task, &cfg, &model, &mods, &rc, Mode::RandomSkip).unwrap();
        for s in &ep.steps {
            if s.step < rc.k + 1 {
                assert!(s.warmup);
                assert_eq!(s.executed_layers.len(), 12);
            } else {
                assert_eq!(s.executed_layers, vec![2, 5, 8, 11]);
            }
        }
    }

    #[test]
    fn calibration_hits_target() {
        let (model, mods) = setup();
        let fm = FlopModel::new(&model, &mods);
        assert_eq!(expected_random_skip_flops(&fm, 0.0), fm.full() as f64);
        let target = 0.6 * fm.full() as f64;
        let q = calibrate_random_skip(&fm, target);
        assert!((expected_random_skip_flops(&fm, q) - target).abs() < 1e-6 * target);
        assert_eq!(calibrate_random_skip(&fm, 2.0 * fm.full() as f64), 0.0);
        assert_eq!(calibrate_random_skip(&fm, 0.0), 1.0);
    }

    #[test]
    fn expected_random_flops_matches_sampling() {
        let (model, mods) = setup();
        let fm = FlopModel::new(&model, &mods);
        let q = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs = vec![0.0; crate::sim::OBS_DIM];
        let instr = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let n = 4000;
        let mut total = 0.0;
        for _ in 0..n {
            let (_, t) = forward_skipped(&model, &mods, &obs, &instr, Gating::Random { prob: q, rng: &mut rng }).unwrap();
            total += t.flops as f64;
        }
        let emp = total / n as f64;
        let exp = expected_random_skip_flops(&fm, q);
        assert!((emp - exp).abs() / exp < 0.01, "{emp} vs {exp}");
    }
}

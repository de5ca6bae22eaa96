use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::{DistillConfig, Selection};
use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, TrainConfig};
use crate::profiler::NoiseWindow;
use crate::runtime::{DeltaLMode, Mode, RolloutConfig, SkipConfig};
use crate::sim::{Phase, SimConfig, OBS_DIM};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a pipeline run needs. Module seeds are derived from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub skip: SkipSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub runtime: RuntimeSection,
    #[serde(default)]
    pub evaluate: EvalSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub ablate: AblateSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_episodes: usize,
    /// Held-out demonstrations for validation, profiling and distillation
    /// reports.
    pub val_episodes: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_episodes: 300,
            val_episodes: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: usize,
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: 64, depth: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            lr_floor: t.lr_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub static_ratio: f64,
    /// Cap on the held-out steps used for the similarity averages.
    pub max_samples: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            static_ratio: 0.2,
            max_samples: 4000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkipSection {
    pub tau: f64,
}

impl Default for SkipSection {
    fn default() -> Self {
        SkipSection {
            tau: crate::runtime::DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub lambda: f64,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub selection: Selection,
    /// Also train the joint-from-scratch ablation for comparison.
    pub compare_joint: bool,
    /// Held-out steps used for the end-of-stage reports.
    pub eval_samples: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            lambda: d.lambda,
            stage1_lr: d.stage1_lr,
            stage2_lr: d.stage2_lr,
            stage1_steps: d.stage1_steps,
            stage2_steps: d.stage2_steps,
            batch_size: d.batch_size,
            selection: d.selection,
            compare_joint: true,
            eval_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeSection {
    pub k: usize,
    pub eta: f64,
    pub eta_verify: Option<f64>,
    pub delta_l_mode: DeltaLMode,
}

impl Default for RuntimeSection {
    fn default() -> Self {
        let r = RolloutConfig::default();
        RuntimeSection {
            k: r.k,
            eta: r.eta,
            eta_verify: r.eta_verify,
            delta_l_mode: r.delta_l,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub modes: Vec<Mode>,
    pub dump_traces: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            episodes: 100,
            modes: Mode::ALL.to_vec(),
            dump_traces: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigmas: Vec<f64>,
    pub trials: usize,
    pub windows: Vec<NoiseWindow>,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let all = |start, end| NoiseWindow { start, end, phase: None };
        let onset = |phase| NoiseWindow {
            start: 0,
            end: 3,
            phase: Some(phase),
        };
        NoiseSection {
            sigmas: vec![0.0, 0.02, 0.05, 0.1],
            trials: 50,
            windows: vec![
                onset(Phase::Free),
                onset(Phase::Fine),
                all(0, 20),
                all(20, 40),
                all(40, 60),
                all(60, 80),
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub episodes: usize,
    pub modes: Vec<Mode>,
    /// Multiplier on distillation steps when an axis needs retraining.
    pub distill_scale: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            episodes: 100,
            modes: vec![Mode::Dysl],
            distill_scale: 1.0,
        }
    }
}

/// Ablation axes and their default sweep values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    StaticRatio,
    K,
    DeltaLMode,
    Eta,
    Lambda,
}

impl Axis {
    pub const ALL: [Axis; 5] = [Axis::StaticRatio, Axis::K, Axis::DeltaLMode, Axis::Eta, Axis::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            Axis::StaticRatio => "static_ratio",
            Axis::K => "k",
            Axis::DeltaLMode => "delta_l_mode",
            Axis::Eta => "eta",
            Axis::Lambda => "lambda",
        }
    }

    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::StaticRatio => &["0.10", "0.15", "0.20", "0.25", "0.30"],
            Axis::K => &["1", "3", "5", "7", "9"],
            Axis::DeltaLMode => &["const:1", "const:2", "const:3", "const:4", "const:5", "adaptive"],
            Axis::Eta => &["0.05", "0.1", "0.14", "0.2", "0.4"],
            Axis::Lambda => &["0", "0.0005", "0.0007", "0.001", "0.01"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| Error::Usage(format!("unknown axis `{s}` (expected static_ratio, k, delta_l_mode, eta, lambda)")))
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: 2024,
            sim: SimConfig::default(),
            data: DataSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            profile: ProfileSection::default(),
            skip: SkipSection::default(),
            distill: DistillSection::default(),
            runtime: RuntimeSection::default(),
            evaluate: EvalSection::default(),
            noise: NoiseSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

/// Seed streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    TrainData,
    ValData,
    ModelInit,
    Train,
    SkipInit,
    Distill,
    EvalTasks,
    Noise,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn stream_seed(&self, stream: Stream) -> u64 {
        splitmix64(self.seed ^ splitmix64(stream as u64 + 1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        self.sim.validate()?;
        if self.data.train_episodes == 0 {
            return Err(Error::config("data.train_episodes", "must be at least 1"));
        }
        if self.data.val_episodes == 0 {
            return Err(Error::config("data.val_episodes", "must be at least 1"));
        }
        self.policy_config().validate()?;
        let t = self.train_config();
        if t.steps == 0 || t.batch_size == 0 {
            return Err(Error::config("train", "steps and batch_size must be at least 1"));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&t.lr_floor) {
            return Err(Error::config("train.lr_floor", "must be in [0, 1]"));
        }
        if !(self.profile.static_ratio > 0.0 && self.profile.static_ratio <= 1.0) {
            return Err(Error::config("profile.static_ratio", "must be in (0, 1]"));
        }
        if self.profile.max_samples == 0 {
            return Err(Error::config("profile.max_samples", "must be at least 1"));
        }
        if !(self.skip.tau > 0.0 && self.skip.tau < 1.0) {
            return Err(Error::config("skip.tau", "must be in (0, 1)"));
        }
        self.distill_config().validate()?;
        if self.distill.eval_samples == 0 {
            return Err(Error::config("distill.eval_samples", "must be at least 1"));
        }
        self.rollout_config().validate()?;
        if self.evaluate.episodes < 2 {
            return Err(Error::config("evaluate.episodes", "must be at least 2"));
        }
        if self.noise.trials == 0 {
            return Err(Error::config("noise.trials", "must be at least 1"));
        }
        if let Some(s) = self.noise.sigmas.iter().find(|s| !(**s >= 0.0 && s.is_finite())) {
            return Err(Error::config("noise.sigmas", format!("{s} is not a finite value >= 0")));
        }
        if let Some(w) = self.noise.windows.iter().find(|w| w.start >= w.end) {
            return Err(Error::config("noise.windows", format!("empty window {}..{}", w.start, w.end)));
        }
        if self.ablate.episodes < 2 {
            return Err(Error::config("ablate.episodes", "must be at least 2"));
        }
        if !(self.ablate.distill_scale > 0.0 && self.ablate.distill_scale.is_finite()) {
            return Err(Error::config("ablate.distill_scale", "must be positive"));
        }
        Ok(())
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            obs_dim: OBS_DIM,
            instr_dim: self.sim.subtasks,
            hidden: self.model.hidden,
            depth: self.model.depth,
            action_dim: crate::sim::ACTION_DIM,
            seed: self.stream_seed(Stream::ModelInit),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            lr_floor: self.train.lr_floor,
            seed: self.stream_seed(Stream::Train),
        }
    }

    pub fn skip_config(&self) -> SkipConfig {
        SkipConfig {
            tau: self.skip.tau,
            seed: self.stream_seed(Stream::SkipInit),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            lambda: d.lambda,
            stage1_lr: d.stage1_lr,
            stage2_lr: d.stage2_lr,
            stage1_steps: d.stage1_steps,
            stage2_steps: d.stage2_steps,
            batch_size: d.batch_size,
            selection: d.selection,
            seed: self.stream_seed(Stream::Distill),
        }
    }

    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            k: self.runtime.k,
            eta: self.runtime.eta,
            eta_verify: self.runtime.eta_verify,
            delta_l: self.runtime.delta_l_mode,
            random_prob: 0.0,
        }
    }

    /// Task seeds of the evaluation episodes, disjoint from the demo seeds
    /// with overwhelming probability.
    pub fn eval_task_seeds(&self, episodes: usize) -> Vec<u64> {
        let base = self.stream_seed(Stream::EvalTasks);
        (0..episodes as u64).map(|i| splitmix64(base.wrapping_add(i))).collect()
    }
}

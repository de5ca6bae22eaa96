use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::policy::PolicyModel;
use crate::runtime::{calibrate_random_skip, rollout_episode, Episode, Mode, RolloutConfig, SkipModules};
use crate::sim::{sample_task_sequence, SimConfig};
use crate::stats::{paired_one_sided, PairedTest};

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub avg_successful_length: f64,
    pub success_rate: f64,
    /// Per-step means pooled over all steps of all episodes.
    pub avg_executed_layers: f64,
    pub avg_flops: f64,
    pub controller_evals_per_step: f64,
    pub verify_rate: f64,
    pub episodes: usize,
}

pub const BENCH_HEADER: &str =
    "mode,avg_successful_length,success_rate,avg_executed_layers,avg_flops,controller_evals_per_step,verify_rate,episodes";

impl BenchRow {
    pub fn from_episodes(mode: Mode, episodes: &[Episode]) -> Self {
        let n = episodes.len().max(1) as f64;
        let steps: usize = episodes.iter().map(|e| e.steps.len()).sum();
        let per_step = |f: &dyn Fn(&crate::runtime::StepRecord) -> f64| -> f64 {
            if steps == 0 {
                return 0.0;
            }
            episodes.iter().flat_map(|e| &e.steps).map(f).sum::<f64>() / steps as f64
        };
        BenchRow {
            mode,
            avg_successful_length: episodes.iter().map(|e| e.score.successful_length as f64).sum::<f64>() / n,
            success_rate: episodes.iter().filter(|e| e.score.success).count() as f64 / n,
            avg_executed_layers: per_step(&|s| s.executed_layers.len() as f64),
            avg_flops: per_step(&|s| s.flops as f64),
            controller_evals_per_step: per_step(&|s| s.controllers_evaluated.len() as f64),
            verify_rate: per_step(&|s| s.verified as u8 as f64),
            episodes: episodes.len(),
        }
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mode,
            self.avg_successful_length,
            self.success_rate,
            self.avg_executed_layers,
            self.avg_flops,
            self.controller_evals_per_step,
            self.verify_rate,
            self.episodes
        )
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub better: Mode,
    pub worse: Mode,
    pub test: PairedTest,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub rows: Vec<BenchRow>,
    pub episodes: Vec<(Mode, Vec<Episode>)>,
    /// Jump probability used by random skipping, if it ran.
    pub random_prob: Option<f64>,
    /// Dysl mean step FLOPs after warm-up, the random-skip calibration target.
    pub dysl_active_flops: Option<f64>,
    pub comparisons: Vec<Comparison>,
}

impl Evaluation {
    pub fn row(&self, mode: Mode) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn episodes_of(&self, mode: Mode) -> Option<&[Episode]> {
        self.episodes.iter().find(|(m, _)| *m == mode).map(|(_, e)| e.as_slice())
    }
}

pub fn run_mode(
    sim_cfg: &SimConfig,
    model: &PolicyModel,
    mods: &SkipModules,
    rollout: &RolloutConfig,
    mode: Mode,
    task_seeds: &[u64],
) -> Result<Vec<Episode>> {
    task_seeds
        .par_iter()
        .map(|&seed| {
            let task = sample_task_sequence(seed, sim_cfg)?;
            rollout_episode(&task, sim_cfg, model, mods, rollout, mode)
        })
        .collect()
}

fn active_mean_flops(episodes: &[Episode]) -> f64 {
    let (sum, n) = episodes
        .iter()
        .flat_map(|e| &e.steps)
        .filter(|s| !s.warmup)
        .fold((0.0, 0usize), |(s, n), r| (s + r.flops as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn lengths(episodes: &[Episode]) -> Vec<f64> {
    episodes.iter().map(|e| e.score.successful_length as f64).collect()
}

/// Run every requested mode over the same tasks. Random skipping is
/// calibrated against dysl, which runs first even when not requested.
pub fn evaluate_modes(
    sim_cfg: &SimConfig,
    model: &PolicyModel,
    mods: &SkipModules,
    rollout: &RolloutConfig,
    modes: &[Mode],
    task_seeds: &[u64],
) -> Result<Evaluation> {
    if modes.is_empty() {
        return Err(Error::Usage("no evaluation modes requested".into()));
    }
    let mut wanted: Vec<Mode> = modes.to_vec();
    wanted.sort();
    wanted.dedup();
    let mut all: Vec<(Mode, Vec<Episode>)> = Vec::new();
    let mut random_prob = None;
    let mut dysl_active = None;
    let need_dysl = wanted.contains(&Mode::Dysl) || wanted.contains(&Mode::RandomSkip);
    if need_dysl {
        let eps = run_mode(sim_cfg, model, mods, rollout, Mode::Dysl, task_seeds)?;
        dysl_active = Some(active_mean_flops(&eps));
        all.push((Mode::Dysl, eps));
    }
    for &mode in &wanted {
        match mode {
            Mode::Dysl => {}
            Mode::RandomSkip => {
                let fm = FlopModel::new(model, mods);
                let q = calibrate_random_skip(&fm, dysl_active.expect("dysl ran"));
                random_prob = Some(q);
                let rc = RolloutConfig {
                    random_prob: q,
                    ..*rollout
                };
                all.push((mode, run_mode(sim_cfg, model, mods, &rc, mode, task_seeds)?));
            }
            _ => all.push((mode, run_mode(sim_cfg, model, mods, rollout, mode, task_seeds)?)),
        }
    }
    all.retain(|(m, _)| wanted.contains(m));
    all.sort_by_key(|(m, _)| *m);

    let rows = all.iter().map(|(m, e)| BenchRow::from_episodes(*m, e)).collect();
    let mut comparisons = Vec::new();
    let find = |m: Mode| all.iter().find(|(x, _)| *x == m).map(|(_, e)| lengths(e));
    if let Some(d) = find(Mode::Dysl) {
        for other in [Mode::RandomSkip, Mode::ControllersOnly] {
            if let Some(o) = find(other) {
                if d.len() >= 2 {
                    comparisons.push(Comparison {
                        better: Mode::Dysl,
                        worse: other,
                        test: paired_one_sided(&d, &o)?,
                    });
                }
            }
        }
    }
    Ok(Evaluation {
        rows,
        episodes: all,
        random_prob,
        dysl_active_flops: dysl_active,
        comparisons,
    })
}

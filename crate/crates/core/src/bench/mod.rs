//! Pipeline stages behind the command line. Every stage reads what earlier
//! stages left in the output directory and writes its own artifacts there;
//! rerunning a stage with the same configuration rewrites identical bytes.

mod config;
mod eval;

pub use config::{
    AblateSection, Axis, DataSection, DistillSection, EvalSection, ModelSection, NoiseSection, PipelineConfig,
    ProfileSection, RuntimeSection, SkipSection, Stream, TrainSection, SCHEMA_VERSION,
};
pub use eval::{bench_csv, evaluate_modes, run_mode, BenchRow, Comparison, Evaluation, BENCH_HEADER};

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::distill::{run_joint_from_scratch, run_two_stage, DistillConfig, StageReport};
use crate::error::{Error, Result};
use crate::flops::FlopModel;
use crate::policy::{train_behavior_cloning, PolicyModel, Sample};
use crate::profiler::{
    noise_csv, noise_importance, profile_io_csv, profile_layers, profile_pairs_csv, select_static, spearman,
    zero_shot_sensitivity, LayerProfile, StaticSet,
};
use crate::runtime::{Mode, SkipModules};
use crate::sim::{generate_dataset, Dataset, Phase};

pub const TRAIN_DATA: &str = "dataset_train.jsonl";
pub const VAL_DATA: &str = "dataset_val.jsonl";
pub const MODEL: &str = "model.json";
pub const PROFILE: &str = "profile.json";
pub const STATIC_SET: &str = "static_set.json";
pub const SKIP: &str = "skip_modules.json";
pub const SKIP_JOINT: &str = "skip_modules_joint.json";
pub const DISTILL_SUMMARY: &str = "distill_summary.json";
pub const BENCH_REPORT: &str = "bench_report.csv";
pub const EVAL_SUMMARY: &str = "evaluate.json";
pub const NOISE_STUDY: &str = "noise_study.csv";
pub const REPORT: &str = "report.md";

fn write(out: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = out.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, contents)?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn read(out: &Path, name: &str, stage: &str) -> Result<String> {
    let path = out.join(name);
    fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact {
            path: path.display().to_string(),
            stage: stage.to_string(),
        },
        _ => Error::Io(e),
    })
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub train_steps: usize,
    pub val_steps: usize,
    pub expert_success_rate: f64,
    pub fine_fraction: f64,
}

pub fn gen_data(cfg: &PipelineConfig, out: &Path) -> Result<DataSummary> {
    cfg.validate()?;
    let train = generate_dataset(cfg.data.train_episodes, cfg.stream_seed(Stream::TrainData), &cfg.sim)?;
    let val = generate_dataset(cfg.data.val_episodes, cfg.stream_seed(Stream::ValData), &cfg.sim)?;
    write(out, TRAIN_DATA, &train.to_jsonl()?)?;
    write(out, VAL_DATA, &val.to_jsonl()?)?;
    let scores: Vec<_> = train.expert_scores.iter().chain(&val.expert_scores).collect();
    let fine = train.records.iter().filter(|r| r.phase == Phase::Fine).count();
    let summary = DataSummary {
        train_steps: train.records.len(),
        val_steps: val.records.len(),
        expert_success_rate: scores.iter().filter(|s| s.success).count() as f64 / scores.len() as f64,
        fine_fraction: fine as f64 / train.records.len() as f64,
    };
    write(out, "gen_data.json", &to_json(&summary)?)?;
    Ok(summary)
}

pub fn load_dataset(out: &Path, name: &str) -> Result<Dataset> {
    Dataset::from_jsonl(&read(out, name, "gen-data")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub initial_val_mse: f64,
    pub final_val_mse: f64,
    pub final_train_loss: f64,
}

pub fn train_base(cfg: &PipelineConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let train = load_dataset(out, TRAIN_DATA)?.samples();
    let val = load_dataset(out, VAL_DATA)?.samples();
    let mut model = PolicyModel::build(cfg.policy_config())?;
    let initial_val_mse = model.mse(&val)?;
    let losses = train_behavior_cloning(&mut model, &train, &cfg.train_config())?;
    let summary = TrainSummary {
        initial_val_mse,
        final_val_mse: model.mse(&val)?,
        final_train_loss: *losses.last().unwrap_or(&f64::NAN),
    };
    let mut log = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        log.push_str(&format!("{i},{l}\n"));
    }
    write(out, "train_base.csv", &log)?;
    write(out, MODEL, &checkpoint::model_to_json(&model)?)?;
    write(out, "train_base.json", &to_json(&summary)?)?;
    Ok(summary)
}

pub fn load_model(out: &Path) -> Result<PolicyModel> {
    checkpoint::model_from_json(&read(out, MODEL, "train-base")?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub profile: LayerProfile,
    pub zero_shot_delta: Vec<f64>,
    /// Rank correlation between io similarity and zero-shot damage.
    pub spearman: f64,
    pub static_ratio: f64,
    pub static_layers: Vec<usize>,
}

fn capped(samples: Vec<Sample>, cap: usize) -> Vec<Sample> {
    if samples.len() <= cap {
        return samples;
    }
    let stride = samples.len() as f64 / cap as f64;
    (0..cap).map(|i| samples[(i as f64 * stride) as usize].clone()).collect()
}

pub fn profile(cfg: &PipelineConfig, out: &Path) -> Result<ProfileSummary> {
    cfg.validate()?;
    let model = load_model(out)?;
    let val = capped(load_dataset(out, VAL_DATA)?.samples(), cfg.profile.max_samples);
    let profile = profile_layers(&model, &val)?;
    let zero_shot_delta = zero_shot_sensitivity(&model, &val)?;
    let static_set = select_static(&profile, cfg.profile.static_ratio)?;
    let summary = ProfileSummary {
        spearman: spearman(&profile.io_similarity, &zero_shot_delta),
        profile,
        zero_shot_delta,
        static_ratio: cfg.profile.static_ratio,
        static_layers: static_set.layers().to_vec(),
    };
    write(out, "profile_io.csv", &profile_io_csv(&summary.profile))?;
    write(out, "profile_pairs.csv", &profile_pairs_csv(&summary.profile))?;
    let mut zs = String::from("layer,io_similarity,zero_shot_mse_delta\n");
    for (i, (s, d)) in summary.profile.io_similarity.iter().zip(&summary.zero_shot_delta).enumerate() {
        zs.push_str(&format!("{i},{s},{d}\n"));
    }
    write(out, "zero_shot.csv", &zs)?;
    write(out, STATIC_SET, &to_json(&static_set)?)?;
    write(out, PROFILE, &to_json(&summary)?)?;
    Ok(summary)
}

pub fn load_profile(out: &Path) -> Result<ProfileSummary> {
    Ok(serde_json::from_str(&read(out, PROFILE, "profile")?)?)
}

pub fn load_static_set(out: &Path) -> Result<StaticSet> {
    Ok(serde_json::from_str(&read(out, STATIC_SET, "profile")?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSummary {
    pub static_layers: Vec<usize>,
    pub stage1_initial_loss: f64,
    pub stage1_final_loss: f64,
    pub stage2_final_loss: f64,
    pub two_stage_skip_rate: f64,
    pub two_stage_mean_gate: f64,
    pub joint_skip_rate: Option<f64>,
    pub joint_mean_gate: Option<f64>,
    pub reports: Vec<StageReport>,
}

fn mean_gate(r: &StageReport) -> f64 {
    let n = r.controller_gates.len().max(1) as f64;
    r.controller_gates.iter().map(|(_, g)| g).sum::<f64>() / n
}

/// Two-stage distillation of fresh skip modules for `static_set`.
pub fn distill_modules(
    cfg: &PipelineConfig,
    dcfg: &DistillConfig,
    model: &PolicyModel,
    static_set: StaticSet,
    train: &[Sample],
    eval: &[Sample],
) -> Result<(SkipModules, Vec<StageReport>)> {
    let mods = SkipModules::init(model, static_set, cfg.skip_config())?;
    run_two_stage(model, mods, train, eval, dcfg)
}

pub fn distill(cfg: &PipelineConfig, out: &Path) -> Result<DistillSummary> {
    cfg.validate()?;
    let model = load_model(out)?;
    let static_set = load_static_set(out)?;
    let train = load_dataset(out, TRAIN_DATA)?.samples();
    let eval = capped(load_dataset(out, VAL_DATA)?.samples(), cfg.distill.eval_samples);
    let dcfg = cfg.distill_config();
    let (mods, reports) = distill_modules(cfg, &dcfg, &model, static_set.clone(), &train, &eval)?;
    write(out, "distill_stage1.csv", &reports[0].log_csv())?;
    write(out, "distill_stage2.csv", &reports[1].log_csv())?;
    write(out, SKIP, &checkpoint::skip_to_json(&mods, model.hidden())?)?;
    let mut summary = DistillSummary {
        static_layers: static_set.layers().to_vec(),
        stage1_initial_loss: reports[0].initial_loss(),
        stage1_final_loss: reports[0].final_loss(),
        stage2_final_loss: reports[1].final_loss(),
        two_stage_skip_rate: reports[1].skip_rate,
        two_stage_mean_gate: mean_gate(&reports[1]),
        joint_skip_rate: None,
        joint_mean_gate: None,
        reports,
    };
    if cfg.distill.compare_joint {
        let (joint, report) = run_joint_from_scratch(&model, static_set, cfg.skip_config(), &train, &eval, &dcfg)?;
        write(out, "distill_joint.csv", &report.log_csv())?;
        write(out, SKIP_JOINT, &checkpoint::skip_to_json(&joint, model.hidden())?)?;
        summary.joint_skip_rate = Some(report.skip_rate);
        summary.joint_mean_gate = Some(mean_gate(&report));
        summary.reports.push(report);
    }
    write(out, DISTILL_SUMMARY, &to_json(&summary)?)?;
    Ok(summary)
}

pub fn load_skip(out: &Path) -> Result<SkipModules> {
    checkpoint::skip_from_json(&read(out, SKIP, "distill")?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rows: Vec<BenchRow>,
    pub random_prob: Option<f64>,
    pub dysl_active_flops: Option<f64>,
    pub full_model_flops: u64,
    pub comparisons: Vec<Comparison>,
}

pub fn evaluate(cfg: &PipelineConfig, out: &Path, modes: &[Mode]) -> Result<EvalSummary> {
    cfg.validate()?;
    let model = load_model(out)?;
    let mods = load_skip(out)?;
    let modes = if modes.is_empty() { cfg.evaluate.modes.clone() } else { modes.to_vec() };
    let seeds = cfg.eval_task_seeds(cfg.evaluate.episodes);
    let ev = evaluate_modes(&cfg.sim, &model, &mods, &cfg.rollout_config(), &modes, &seeds)?;
    if cfg.evaluate.dump_traces {
        for (mode, episodes) in &ev.episodes {
            for (i, ep) in episodes.iter().enumerate() {
                write(out, &format!("traces/{mode}/episode_{i:04}.jsonl"), &ep.to_jsonl()?)?;
            }
        }
    }
    write(out, BENCH_REPORT, &bench_csv(&ev.rows))?;
    let summary = EvalSummary {
        rows: ev.rows,
        random_prob: ev.random_prob,
        dysl_active_flops: ev.dysl_active_flops,
        full_model_flops: FlopModel::new(&model, &mods).full(),
        comparisons: ev.comparisons,
    };
    write(out, EVAL_SUMMARY, &to_json(&summary)?)?;
    Ok(summary)
}

pub const ABLATE_HEADER: &str = "axis,value,mode,avg_successful_length,success_rate,avg_executed_layers,avg_flops,controller_evals_per_step,verify_rate,episodes";

pub fn ablate(cfg: &PipelineConfig, out: &Path, axis: Axis, values: &[String]) -> Result<String> {
    cfg.validate()?;
    let values = if values.is_empty() { axis.default_values() } else { values.to_vec() };
    let model = load_model(out)?;
    let base_mods = load_skip(out)?;
    let seeds = cfg.eval_task_seeds(cfg.ablate.episodes);
    let needs_training = matches!(axis, Axis::StaticRatio | Axis::Lambda);
    let (train, eval, profile) = if needs_training {
        (
            load_dataset(out, TRAIN_DATA)?.samples(),
            capped(load_dataset(out, VAL_DATA)?.samples(), cfg.distill.eval_samples),
            Some(load_profile(out)?),
        )
    } else {
        (Vec::new(), Vec::new(), None)
    };
    let mut csv = format!("{ABLATE_HEADER}\n");
    for value in &values {
        let mut c = cfg.clone();
        let parse_f = |v: &str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(axis.name(), format!("`{v}` is not a number")))
        };
        match axis {
            Axis::StaticRatio => c.profile.static_ratio = parse_f(value)?,
            Axis::K => {
                c.runtime.k = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::config("k", format!("`{value}` is not an integer")))?
            }
            Axis::DeltaLMode => c.runtime.delta_l_mode = value.parse()?,
            Axis::Eta => c.runtime.eta = parse_f(value)?,
            Axis::Lambda => c.distill.lambda = parse_f(value)?,
        }
        c.validate()?;
        let mods = if needs_training {
            let profile = profile.as_ref().expect("profile loaded");
            let static_set = select_static(&profile.profile, c.profile.static_ratio)?;
            let mut dcfg = c.distill_config();
            let scale = |n: usize| ((n as f64 * c.ablate.distill_scale).round() as usize).max(1);
            dcfg.stage1_steps = scale(dcfg.stage1_steps);
            dcfg.stage2_steps = scale(dcfg.stage2_steps);
            distill_modules(&c, &dcfg, &model, static_set, &train, &eval)?.0
        } else {
            base_mods.clone()
        };
        let ev = evaluate_modes(&c.sim, &model, &mods, &c.rollout_config(), &c.ablate.modes, &seeds)?;
        for row in &ev.rows {
            csv.push_str(&format!("{},{},{}\n", axis.name(), value.trim(), row.csv_line()));
        }
    }
    write(out, &format!("ablate_{}.csv", axis.name()), &csv)?;
    Ok(csv)
}

pub fn noise_study(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let model = load_model(out)?;
    let seeds = cfg.eval_task_seeds(cfg.noise.trials);
    let cells = noise_importance(
        &cfg.sim,
        &model,
        &cfg.noise.windows,
        &cfg.noise.sigmas,
        &seeds,
        cfg.stream_seed(Stream::Noise),
    )?;
    let csv = noise_csv(&cells);
    write(out, NOISE_STUDY, &csv)?;
    Ok(csv)
}

/// Recompute the mean step FLOPs of every dumped trace with the independent
/// accounting model. Returns `(mode, mean)` per mode directory found.
pub fn recompute_trace_flops(out: &Path, model: &PolicyModel, mods: &SkipModules) -> Result<Vec<(String, f64)>> {
    let fm = FlopModel::new(model, mods);
    let dir = out.join("traces");
    let mut result = Vec::new();
    if !dir.is_dir() {
        return Ok(result);
    }
    let mut modes: Vec<_> = fs::read_dir(&dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
    modes.sort();
    for mode_dir in modes {
        let mut files: Vec<_> = fs::read_dir(&mode_dir)?.filter_map(|e| e.ok()).map(|e| e.path()).collect();
        files.sort();
        let (mut sum, mut n) = (0.0, 0usize);
        for f in files {
            for line in fs::read_to_string(&f)?.lines().filter(|l| !l.is_empty()) {
                let rec: crate::runtime::StepRecord = serde_json::from_str(line)?;
                let flops = fm.estimate(&rec.to_trace())?;
                if flops != rec.flops {
                    return Err(Error::Integrity(format!(
                        "{}: step {} records {} flops, recomputed {flops}",
                        f.display(),
                        rec.step,
                        rec.flops
                    )));
                }
                sum += flops as f64;
                n += 1;
            }
        }
        let name = mode_dir.file_name().unwrap().to_string_lossy().to_string();
        result.push((name, if n == 0 { 0.0 } else { sum / n as f64 }));
    }
    Ok(result)
}

fn table(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(head) = lines.next() else {
        return String::new();
    };
    let cols = head.split(',').count();
    let mut out = format!("| {} |\n|{}\n", head.replace(',', " | "), "---|".repeat(cols));
    for l in lines {
        out.push_str(&format!("| {} |\n", l.replace(',', " | ")));
    }
    out
}

/// Markdown summary of whatever artifacts exist, with the bench table checked
/// against the dumped traces.
pub fn report(cfg: &PipelineConfig, out: &Path) -> Result<String> {
    cfg.validate()?;
    let bench = read(out, BENCH_REPORT, "evaluate")?;
    let eval: EvalSummary = serde_json::from_str(&read(out, EVAL_SUMMARY, "evaluate")?)?;
    let model = load_model(out)?;
    let mods = load_skip(out)?;
    let mut md = String::from("# Layer-skipping benchmark report\n\n");
    md.push_str(
        "Latency is reported as executed blocks per step and floating point operations \
         (2 per multiply-accumulate), never wall-clock time.\n\n",
    );
    md.push_str(&format!(
        "Full model: {} FLOPs per step. Static layers: {:?}.\n\n",
        eval.full_model_flops,
        mods.static_set.layers()
    ));
    md.push_str("## Modes\n\n");
    md.push_str(&table(&bench));
    if let Some(q) = eval.random_prob {
        md.push_str(&format!("\nRandom-skip bypass probability calibrated to {q:.6}.\n"));
    }
    md.push_str("\n## Paired one-sided tests on successful length\n\n| better | worse | mean diff | t | p |\n|---|---|---|---|---|\n");
    for c in &eval.comparisons {
        md.push_str(&format!(
            "| {} | {} | {:.4} | {} | {:.3e} |\n",
            c.better,
            c.worse,
            c.test.mean_diff,
            c.test.t.map_or("-".to_string(), |t| format!("{t:.4}")),
            c.test.p_value
        ));
    }
    let recomputed = recompute_trace_flops(out, &model, &mods)?;
    if !recomputed.is_empty() {
        md.push_str("\n## Trace cross-check\n\n| mode | avg_flops (report) | avg_flops (recomputed) |\n|---|---|---|\n");
        for (mode, flops) in &recomputed {
            let reported = eval.rows.iter().find(|r| r.mode.name() == mode).map(|r| r.avg_flops);
            md.push_str(&format!(
                "| {mode} | {} | {flops} |\n",
                reported.map_or("-".to_string(), |v| v.to_string())
            ));
            if let Some(r) = reported {
                if (r - flops).abs() > 1e-6 * r.max(1.0) {
                    return Err(Error::Integrity(format!(
                        "mode {mode}: report says {r} FLOPs, traces give {flops}"
                    )));
                }
            }
        }
    }
    if let Ok(text) = read(out, DISTILL_SUMMARY, "distill") {
        let d: DistillSummary = serde_json::from_str(&text)?;
        md.push_str("\n## Distillation\n\n");
        md.push_str(&format!(
            "Stage 1 loss {:.5} -> {:.5}. Two-stage skip rate {:.4}, mean gate {:.4}.\n",
            d.stage1_initial_loss, d.stage1_final_loss, d.two_stage_skip_rate, d.two_stage_mean_gate
        ));
        if let (Some(s), Some(g)) = (d.joint_skip_rate, d.joint_mean_gate) {
            md.push_str(&format!("Joint from scratch: skip rate {s:.4}, mean gate {g:.4}.\n"));
        }
    }
    for axis in Axis::ALL {
        if let Ok(text) = fs::read_to_string(out.join(format!("ablate_{}.csv", axis.name()))) {
            md.push_str(&format!("\n## Ablation: {}\n\n", axis.name()));
            md.push_str(&table(&text));
        }
    }
    if let Ok(text) = fs::read_to_string(out.join(NOISE_STUDY)) {
        md.push_str("\n## Weight-noise study\n\n");
        md.push_str(&table(&text));
    }
    write(out, REPORT, &md)?;
    Ok(md)
}

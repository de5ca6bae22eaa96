//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skipdepth::bench::{self, Axis, PipelineConfig, ABLATE_HEADER};
use skipdepth::distill::{
    sample_segment_layer, stage1_loss, stage1_loss_and_grads, stage2_blend_forward, stage2_loss, stage2_loss_and_grads,
    Selection,
};
use skipdepth::flops::FlopModel;
use skipdepth::numerics::{grad_check, Parameters};
use skipdepth::policy::{PolicyConfig, PolicyModel, Sample};
use skipdepth::profiler::{Segment, StaticSet};
use skipdepth::runtime::{
    continuity, AllowPoints, DeltaLMode, Mode, RolloutConfig, Session, SkipConfig, SkipModules, VerifyGate,
};
use skipdepth::sim::OBS_DIM;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, what: &str) -> std::result::Result<(), String> {
    ensure((a - b).abs() < 1e-9, || format!("{what}: got {a}, expected {b}"))
}

fn toy(obs: usize, hidden: usize, depth: usize, statics: Vec<usize>, seed: u64) -> (PolicyModel, SkipModules) {
    let model = PolicyModel::build(PolicyConfig {
        obs_dim: obs,
        instr_dim: 2,
        hidden,
        depth,
        action_dim: 2,
        seed,
    })
    .unwrap();
    let ss = StaticSet::new(depth, statics).unwrap();
    let mods = SkipModules::init(&model, ss, SkipConfig { tau: 0.5, seed: seed + 1 }).unwrap();
    (model, mods)
}

fn samples(model: &PolicyModel, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let mut instr = vec![0.0; model.config.instr_dim];
            let hot = rng.random_range(0..instr.len());
            instr[hot] = 1.0;
            Sample {
                obs: (0..model.config.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                instr,
                target: (0..model.config.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Blend forward written out layer by layer from the block and module
/// primitives. Returns the action and `(gate, static_layer - selected)` per
/// blended segment.
fn blend_oracle(model: &PolicyModel, mods: &SkipModules, sel: &[Option<usize>], s: &Sample) -> (Vec<f64>, Vec<(f64, f64)>) {
    let mut x = model.embed_input(&s.obs, &s.instr).unwrap();
    let mut gates = Vec::new();
    for (seg, pick) in mods.segments().iter().zip(sel) {
        if let Some(i) = *pick {
            for l in seg.start..i {
                x = model.blocks[l].forward(&x);
            }
            let unit = mods.unit(i).unwrap();
            let g = unit.controller.forward(&x);
            let a = unit.adapter.forward(&x);
            let mut p = x.clone();
            for l in i..seg.static_layer {
                p = model.blocks[l].forward(&p);
            }
            x = a.iter().zip(&p).map(|(a, p)| g * a + (1.0 - g) * p).collect();
            gates.push((g, (seg.static_layer - i) as f64));
        } else {
            for l in seg.dynamic_layers() {
                x = model.blocks[l].forward(&x);
            }
        }
        x = model.blocks[seg.static_layer].forward(&x);
    }
    (model.head_output(&x), gates)
}

fn criterion_1() -> Check {
    let start = Instant::now();

    // Continuity: windows of 2-D actions with hand-computed differences.
    let cases: [(Vec<Vec<f64>>, usize, f64, bool); 6] = [
        (vec![vec![0.0, 0.0], vec![3.0, 4.0]], 1, -5.0, false),
        (vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![3.0, 4.0]], 2, -2.5, false),
        (vec![vec![1.0, 1.0]; 6], 5, 0.0, false),
        (vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]], 3, -1.0, false),
        // Only the last k differences count.
        (vec![vec![9.0, 9.0], vec![0.0, 0.0], vec![0.0, 2.0], vec![0.0, 0.0]], 2, -2.0, false),
        // Short window: mean over the available differences, flagged warm-up.
        (vec![vec![0.0, 0.0], vec![0.6, 0.8]], 5, -1.0, true),
    ];
    for (i, (w, k, want, warm)) in cases.iter().enumerate() {
        let c = continuity(w, *k);
        close(c.value, *want, &format!("continuity case {i}"))?;
        ensure(c.warmup == *warm, || format!("continuity case {i} warm-up flag"))?;
    }

    // Allow points: segments (0..0], (1..4], (5..11] with scripted changes.
    let segs = StaticSet::new(12, vec![0, 4, 11]).unwrap().segments();
    let script: [(f64, f64, DeltaLMode, [usize; 3]); 7] = [
        (-0.25, 0.1, DeltaLMode::Adaptive, [0, 4, 8]),
        (0.05, 0.1, DeltaLMode::Adaptive, [0, 4, 8]),
        (0.3, 0.1, DeltaLMode::Adaptive, [0, 3, 7]),
        (-0.11, 0.1, DeltaLMode::Adaptive, [0, 4, 9]),
        (-0.15, 0.1, DeltaLMode::Const(1), [0, 4, 10]),
        (-5.0, 0.1, DeltaLMode::Adaptive, [0, 4, 11]),
        (0.2, 0.1, DeltaLMode::Adaptive, [0, 3, 10]),
    ];
    let mut ap = AllowPoints::new(segs);
    ensure(ap.points() == [0, 1, 5], || "initial allow points".into())?;
    for (i, (d, eta, mode, want)) in script.iter().enumerate() {
        ap.update(*d, *eta, *mode);
        ensure(ap.points() == want, || format!("allow step {i}: {:?} != {want:?}", ap.points()))?;
    }

    // Blend and both losses against the written-out oracle.
    let mut blend_cases = 0;
    let mut loss_cases = 0;
    for (seed, statics, sel, lambda) in [
        (1u64, vec![3], vec![Some(0)], 0.0),
        (2, vec![3], vec![Some(1)], 0.2),
        (3, vec![3], vec![Some(2)], 0.05),
        (4, vec![1, 4], vec![Some(0), Some(2)], 0.3),
        (5, vec![1, 4], vec![Some(0), Some(3)], 1.0),
        (6, vec![0, 4], vec![None, Some(1)], 0.01),
    ] {
        let depth = statics.last().unwrap() + 1;
        let (model, mods) = toy(3, 8, depth, statics, seed);
        let batch = samples(&model, 4, seed + 10);
        let mut task = 0.0;
        let mut norm = 0.0;
        let mut s1 = 0.0;
        for s in &batch {
            let (want, gates) = blend_oracle(&model, &mods, &sel, s);
            let (got, got_gates) = stage2_blend_forward(&model, &mods, &sel, &s.obs, &s.instr).unwrap();
            for (a, b) in got.iter().zip(&want) {
                close(*a, *b, "blend action")?;
            }
            for (a, (b, _)) in got_gates.iter().zip(&gates) {
                close(*a, *b, "blend gate")?;
            }
            blend_cases += 1;
            task += sq(&want, &s.target) / want.len() as f64;
            norm += gates.iter().map(|(g, span)| (1.0 - g) * span).sum::<f64>();
            let (_, trace) = model.forward_recorded(&s.obs, &s.instr).unwrap();
            for l in mods.static_set.dynamic_layers() {
                let a = mods.unit(l).unwrap().adapter.forward(&trace.states[l]);
                s1 += sq(&a, &trace.states[mods.static_set.next_static(l)]);
            }
        }
        let n = batch.len() as f64;
        let selections = vec![sel.clone(); batch.len()];
        let l2 = stage2_loss(&model, &mods, &batch, &selections, lambda).unwrap();
        close(l2.task, task / n, "stage-2 task loss")?;
        close(l2.norm, norm / n, "stage-2 norm")?;
        close(l2.total, task / n + lambda * norm / n, "stage-2 total")?;
        close(stage1_loss(&model, &mods, &batch).unwrap(), s1 / n, "stage-1 loss")?;
        loss_cases += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(elapsed < 1.0, || format!("took {elapsed:.2}s"))?;
    Ok(format!(
        "6 continuity, 7 allow-point, {blend_cases} blend, {loss_cases} x2 loss cases in {elapsed:.3}s"
    ))
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let configs = [
        (3, 6, 4, vec![3], vec![Some(1)], 0.3),
        (4, 8, 5, vec![1, 4], vec![Some(0), Some(2)], 0.1),
        (2, 8, 6, vec![0, 2, 5], vec![None, Some(1), Some(4)], 1.0),
    ];
    for (i, (obs, hidden, depth, statics, sel, lambda)) in configs.into_iter().enumerate() {
        let (model, mods) = toy(obs, hidden, depth, statics, 40 + i as u64);
        let batch = samples(&model, 3, 50 + i as u64);
        let flat = mods.to_flat();
        let with = |p: &[f64]| {
            let mut m = mods.clone();
            m.load_flat(p).unwrap();
            m
        };
        let (_, g1) = stage1_loss_and_grads(&model, &mods, &batch).unwrap();
        let e1 = grad_check(|p| stage1_loss(&model, &with(p), &batch).unwrap(), &flat, &g1.to_flat(), 1e-5).unwrap();
        let selections = vec![sel; batch.len()];
        let (_, g2) = stage2_loss_and_grads(&model, &mods, &batch, &selections, lambda).unwrap();
        let e2 = grad_check(
            |p| stage2_loss(&model, &with(p), &batch, &selections, lambda).unwrap().total,
            &flat,
            &g2.to_flat(),
            1e-5,
        )
        .unwrap();
        worst = worst.max(e1).max(e2);
    }
    let elapsed = start.elapsed().as_secs_f64();
    ensure(worst < 1e-4, || format!("max relative error {worst:.2e}"))?;
    ensure(elapsed < 10.0, || format!("took {elapsed:.1}s"))?;
    Ok(format!("3 configurations, max relative error {worst:.2e}, {elapsed:.2}s"))
}

fn criterion_3() -> Check {
    let mut steps = 0usize;
    let mut verified = 0usize;
    let mut adapters = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    while steps < 10_000 {
        let depth = rng.random_range(4..=12);
        let mut statics: Vec<usize> = (0..depth - 1).filter(|_| rng.random::<f64>() < 0.25).collect();
        statics.push(depth - 1);
        let seed = rng.random::<u64>();
        let model = PolicyModel::build(PolicyConfig {
            hidden: 16,
            depth,
            seed,
            ..PolicyConfig::default()
        })
        .unwrap();
        let mut mods = SkipModules::init(&model, StaticSet::new(depth, statics).unwrap(), SkipConfig { tau: 0.5, seed }).unwrap();
        for l in mods.static_set.dynamic_layers() {
            mods.unit_mut(l).unwrap().controller.fc2.b[0] = rng.random_range(-3.0..3.0);
        }
        let segments = mods.segments();
        let fm = FlopModel::new(&model, &mods);
        let eta = rng.random_range(0.02..0.3);
        let cfg = RolloutConfig {
            eta,
            random_prob: rng.random(),
            ..RolloutConfig::default()
        };
        for mode in Mode::ALL {
            let mut session = Session::new(&mods, &cfg, mode, seed).map_err(|e| e.to_string())?;
            let mut obs = vec![0.0; OBS_DIM];
            let mut hist: Vec<(f64, bool)> = Vec::new();
            for t in 0..30 {
                let jump = rng.random::<f64>() < 0.1;
                for v in obs.iter_mut() {
                    let d = if jump { rng.random_range(-1.0..1.0) } else { rng.random_range(-0.05..0.05) };
                    *v = f64::clamp(*v + d, -1.0, 1.0);
                }
                let mut instr = vec![0.0; 5];
                instr[(t / 10) % 5] = 1.0;
                let out = session.step(&model, &mods, &obs, &instr).map_err(|e| e.to_string())?;
                let tr = &out.trace;
                for &l in mods.static_set.layers() {
                    ensure(tr.executed.contains(&l), || format!("static layer {l} skipped"))?;
                }
                ensure(fm.estimate(tr).ok() == Some(tr.flops), || "trace FLOPs disagree with the accounting".into())?;
                ensure(session.guidance().allow.is_confined(), || "allow point left its segment".into())?;
                if matches!(mode, Mode::Dysl | Mode::ControllersOnly) {
                    for &(l, _) in &tr.controllers {
                        let si = segments.iter().position(|s| s.dynamic_layers().contains(&l)).unwrap();
                        ensure(l >= out.allow_points[si], || format!("controller at {l} before allow point"))?;
                    }
                }
                if mode == Mode::Full || out.warmup || tr.verified {
                    let full = model.forward(&obs, &instr).unwrap();
                    ensure(out.action == full, || "unskipped step differs from the plain forward pass".into())?;
                }
                hist.push((out.c_t, tr.verified));
                verified += tr.verified as usize;
                adapters += tr.adapters.len();
                steps += 1;
            }
            for t in 2..hist.len() {
                if hist[t].1 && hist[t - 1].1 {
                    ensure(hist[t - 1].0 - hist[t - 2].0 >= -eta, || "verification fired twice within one drop".into())?;
                }
            }
        }
    }
    // Scripted continuity changes: one verification per maximal drop run.
    let scripts: [(&[f64], usize); 5] = [
        (&[0.0, -0.2, -0.3, 0.0, -0.2], 2),
        (&[-0.2, -0.2, -0.2, -0.2], 1),
        (&[0.1, 0.05, -0.05, 0.0], 0),
        (&[-0.11, 0.2, -0.11, 0.2, -0.11], 3),
        (&[-0.1, -0.100001, -0.1], 1),
    ];
    for (i, (deltas, want)) in scripts.iter().enumerate() {
        let mut gate = VerifyGate::default();
        let fires = deltas.iter().filter(|d| gate.observe(**d, 0.1)).count();
        ensure(fires == *want, || format!("script {i}: {fires} verifications, expected {want}"))?;
    }
    ensure(verified > 0 && adapters > 0, || "fuzzing never skipped or verified".into())?;
    Ok(format!("{steps} fuzzed steps ({adapters} adapter jumps, {verified} verifications), 5 scripted drop sequences"))
}

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for m in [2usize, 3, 4, 8] {
        let seg = Segment {
            start: 1,
            static_layer: 1 + m,
        };
        let h: f64 = (1..=m).map(|r| 1.0 / r as f64).sum();
        let mut counts = vec![0usize; m];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_segment_layer(&seg, Selection::Harmonic, &mut rng).unwrap() - seg.start] += 1;
        }
        for (r, &c) in counts.iter().enumerate() {
            let p = 1.0 / ((r + 1) as f64 * h);
            let z = (c as f64 - p * n as f64).abs() / (n as f64 * p * (1.0 - p)).sqrt();
            worst = worst.max(z);
            ensure(z <= 3.0, || format!("m={m} r={}: z = {z:.2}", r + 1))?;
        }
    }
    Ok(format!("largest deviation {worst:.2} sigma"))
}

struct Pipeline {
    eval: bench::EvalSummary,
    distill: bench::DistillSummary,
    /// Mean FLOPs of random-skip steps after warm-up, from the traces.
    random_active_flops: f64,
    elapsed: f64,
}

fn active_flops_from_traces(dir: &Path) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for entry in std::fs::read_dir(dir).unwrap() {
        for line in std::fs::read_to_string(entry.unwrap().path()).unwrap().lines() {
            let rec: skipdepth::runtime::StepRecord = serde_json::from_str(line).unwrap();
            if !rec.warmup {
                sum += rec.flops as f64;
                n += 1;
            }
        }
    }
    sum / n as f64
}

fn run_default_pipeline(cfg: &PipelineConfig, out: &Path) -> skipdepth::Result<Pipeline> {
    let start = Instant::now();
    bench::gen_data(cfg, out)?;
    bench::train_base(cfg, out)?;
    bench::profile(cfg, out)?;
    let distill = bench::distill(cfg, out)?;
    let eval = bench::evaluate(cfg, out, &[])?;
    Ok(Pipeline {
        eval,
        distill,
        random_active_flops: active_flops_from_traces(&out.join("traces/random-skip")),
        elapsed: start.elapsed().as_secs_f64(),
    })
}

fn criterion_5(p: &Pipeline) -> Check {
    let row = |m: Mode| p.eval.rows.iter().find(|r| r.mode == m).unwrap();
    let (full, dysl, ctrl, rnd) = (row(Mode::Full), row(Mode::Dysl), row(Mode::ControllersOnly), row(Mode::RandomSkip));
    let cmp = |m: Mode| p.eval.comparisons.iter().find(|c| c.worse == m).unwrap();
    let retained = dysl.avg_successful_length / full.avg_successful_length;
    let flops = dysl.avg_flops / full.avg_flops;
    let dysl_active = p.eval.dysl_active_flops.unwrap();
    let p_rand = cmp(Mode::RandomSkip).test.p_value;
    let two = p.distill.two_stage_skip_rate;
    let joint = p.distill.joint_skip_rate.unwrap();
    let summary = format!(
        "full {:.2} | dysl {:.2} ({:.1}% length, {:.1}% FLOPs) | random-skip {:.2} at {:.0} vs {:.0} post-warm-up FLOPs, p={:.2e} | controllers-only {:.2}, p={:.3} | skip rate two-stage {:.3} vs joint {:.3} | {:.0}s",
        full.avg_successful_length,
        dysl.avg_successful_length,
        100.0 * retained,
        100.0 * flops,
        rnd.avg_successful_length,
        p.random_active_flops,
        dysl_active,
        p_rand,
        ctrl.avg_successful_length,
        cmp(Mode::ControllersOnly).test.p_value,
        two,
        joint,
        p.elapsed
    );
    let mut failed = Vec::new();
    if dysl.episodes < 100 {
        failed.push("fewer than 100 episodes");
    }
    if retained < 0.9 {
        failed.push("(a) length retained");
    }
    if flops > 0.7 {
        failed.push("(a) FLOPs");
    }
    if p_rand.is_nan() || p_rand >= 0.05 {
        failed.push("(b) random-skip test");
    }
    if (p.random_active_flops - dysl_active).abs() > 0.05 * dysl_active {
        failed.push("(b) FLOPs not matched");
    }
    if ctrl.avg_successful_length >= dysl.avg_successful_length {
        failed.push("(c) controllers-only");
    }
    if two <= joint {
        failed.push("(d) two-stage skip rate");
    }
    if p.elapsed > 1800.0 {
        failed.push("runtime");
    }
    if failed.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{} failed; {summary}", failed.join(", ")))
    }
}

fn criterion_6(cfg: &PipelineConfig, out: &Path) -> Check {
    let start = Instant::now();
    let mut rows = 0;
    for axis in Axis::ALL {
        let values = axis.default_values();
        let csv = bench::ablate(cfg, out, axis, &[]).map_err(|e| format!("{}: {e}", axis.name()))?;
        let mut lines = csv.lines();
        ensure(lines.next() == Some(ABLATE_HEADER), || format!("{}: bad header", axis.name()))?;
        let body: Vec<&str> = lines.collect();
        ensure(body.len() == values.len() * cfg.ablate.modes.len(), || {
            format!("{}: {} rows for {} values", axis.name(), body.len(), values.len())
        })?;
        let cols = ABLATE_HEADER.split(',').count();
        for (line, value) in body.iter().zip(&values) {
            let f: Vec<&str> = line.split(',').collect();
            ensure(f.len() == cols && f[0] == axis.name() && f[1] == value, || format!("malformed row `{line}`"))?;
            ensure(f[3..].iter().all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)), || {
                format!("non-numeric field in `{line}`")
            })?;
        }
        ensure(out.join(format!("ablate_{}.csv", axis.name())).is_file(), || "table not written".into())?;
        rows += body.len();
    }
    Ok(format!("5 axes, {rows} rows, {:.0}s", start.elapsed().as_secs_f64()))
}

fn criterion_7(cfg: &PipelineConfig, out: &Path) -> Check {
    let csv = bench::noise_study(cfg, out).map_err(|e| e.to_string())?;
    let sigma_max = cfg.noise.sigmas.iter().cloned().fold(f64::MIN, f64::max);
    let (mut free, mut fine) = (Vec::new(), Vec::new());
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let sigma: f64 = f[3].parse().unwrap();
        let rate: f64 = f[4].parse().unwrap();
        let trials: usize = f[5].parse().unwrap();
        ensure(trials == 50, || format!("{trials} trials per cell"))?;
        if sigma == sigma_max {
            match f[2] {
                "FREE" => free.push(rate),
                "FINE" => fine.push(rate),
                _ => {}
            }
        }
    }
    ensure(!free.is_empty() && !fine.is_empty(), || "no FREE or FINE cells".into())?;
    let worst_free = free.iter().cloned().fold(f64::MAX, f64::min);
    let best_fine = fine.iter().cloned().fold(f64::MIN, f64::max);
    let msg = format!("sigma {sigma_max}: FINE completion {fine:?} vs FREE {free:?}");
    ensure(best_fine < worst_free, || msg.clone())?;
    Ok(msg)
}

fn criterion_8() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = common::tiny_config();
    cfg.ablate.modes = vec![Mode::Dysl, Mode::RandomSkip];
    let path = common::write_config(dir.path(), &cfg);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut stdout = Vec::new();
    for out in [&a, &b] {
        let mut s = common::run_pipeline(&path, out);
        let (c, o) = (path.to_str().unwrap(), out.to_str().unwrap());
        s.push(common::run_ok(&["ablate", "--config", c, "--out", o, "--axis", "lambda", "--values", "0,0.01"]));
        s.push(common::run_ok(&["config", "--config", c, "--out", o]));
        stdout.push(s);
    }
    ensure(stdout[0] == stdout[1], || "stdout differs between reruns".into())?;
    let (fa, fb) = (common::snapshot(&a), common::snapshot(&b));
    ensure(fa.len() == fb.len(), || "different artifact sets".into())?;
    for ((na, ca), (nb, cb)) in fa.iter().zip(&fb) {
        ensure(na == nb && ca == cb, || format!("{na} differs between reruns"))?;
    }
    Ok(format!("{} artifacts identical across two full reruns", fa.len()))
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    let mut record = |id, name, r: Check| {
        let (pass, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
        outcomes.push(Outcome { id, name, pass, detail });
    };
    record(1, "equation fidelity", criterion_1());
    record(2, "gradient checks", criterion_2());
    record(3, "structural invariants", criterion_3());
    record(4, "harmonic selection", criterion_4());

    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default();
    match run_default_pipeline(&cfg, dir.path()) {
        Ok(p) => record(5, "pipeline", criterion_5(&p)),
        Err(e) => record(5, "pipeline", Err(e.to_string())),
    }
    record(6, "ablation grids", criterion_6(&cfg, dir.path()));
    record(7, "noise importance", criterion_7(&cfg, dir.path()));
    record(8, "determinism", criterion_8());

    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} ({}): {}", o.id, o.name, o.detail))
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:#?}");
}

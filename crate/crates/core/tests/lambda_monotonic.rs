use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use skipdepth::distill::{run_two_stage, DistillConfig};
use skipdepth::policy::{PolicyConfig, PolicyModel, Sample};
use skipdepth::profiler::StaticSet;
use skipdepth::runtime::{SkipConfig, SkipModules};

const LAMBDAS: [f64; 3] = [0.0, 0.01, 0.1];

/// The backbone labels its own inputs, so a perfect student reproduces the
/// teacher exactly and only the penalty pushes towards skipping.
fn self_distillation_set(model: &PolicyModel, n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let obs: Vec<f64> = (0..model.config.obs_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut instr = vec![0.0; model.config.instr_dim];
            let hot = rng.random_range(0..model.config.instr_dim);
            instr[hot] = 1.0;
            let target = model.forward(&obs, &instr).unwrap();
            Sample { obs, instr, target }
        })
        .collect()
}

/// Mean controller gate over the held-out inputs after two-stage training.
fn mean_gate_for(seed: u64, lambda: f64) -> f64 {
    let model = PolicyModel::build(PolicyConfig {
        obs_dim: 6,
        instr_dim: 3,
        hidden: 16,
        depth: 8,
        action_dim: 3,
        seed,
    })
    .unwrap();
    let data = self_distillation_set(&model, 256, seed ^ 1);
    let eval = self_distillation_set(&model, 128, seed ^ 2);
    let mods = SkipModules::init(&model, StaticSet::new(8, vec![0, 7]).unwrap(), SkipConfig { tau: 0.5, seed }).unwrap();
    let cfg = DistillConfig {
        lambda,
        stage1_steps: 200,
        stage2_steps: 300,
        batch_size: 16,
        seed,
        ..DistillConfig::default()
    };
    let (_, reports) = run_two_stage(&model, mods, &data, &eval, &cfg).unwrap();
    let gates = &reports[1].controller_gates;
    gates.iter().map(|(_, g)| g).sum::<f64>() / gates.len() as f64
}

#[test]
fn mean_gate_grows_with_lambda() {
    let mut inversions = 0;
    let mut table = Vec::new();
    for seed in 0..5u64 {
        let rates: Vec<f64> = LAMBDAS.iter().map(|&l| mean_gate_for(seed, l)).collect();
        inversions += rates.windows(2).filter(|w| w[1] < w[0]).count();
        table.push(rates);
    }
    println!("mean gate per seed for lambda {LAMBDAS:?}: {table:?}");
    assert!(inversions <= 1, "{inversions} inversions: {table:?}");
    let mean = |i: usize| table.iter().map(|r| r[i]).sum::<f64>() / table.len() as f64;
    assert!(mean(2) > mean(0), "no overall growth: {table:?}");
}

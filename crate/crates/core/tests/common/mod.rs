#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skipdepth::bench::PipelineConfig;

/// A pipeline small enough to run every stage in a few seconds.
pub fn tiny_config() -> PipelineConfig {
    let mut c = PipelineConfig {
        seed: 99,
        ..PipelineConfig::default()
    };
    c.data.train_episodes = 8;
    c.data.val_episodes = 3;
    c.model.hidden = 16;
    c.model.depth = 6;
    c.train.steps = 150;
    c.train.batch_size = 16;
    c.profile.max_samples = 200;
    c.distill.stage1_steps = 40;
    c.distill.stage2_steps = 40;
    c.distill.batch_size = 8;
    c.distill.eval_samples = 100;
    c.evaluate.episodes = 3;
    c.noise.sigmas = vec![0.0, 0.1];
    c.noise.trials = 2;
    c.noise.windows.truncate(2);
    c.ablate.episodes = 2;
    c.ablate.distill_scale = 0.5;
    c
}

pub fn write_config(dir: &Path, cfg: &PipelineConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

pub fn skipdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skipdepth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = skipdepth(args);
    assert!(
        out.status.success(),
        "skipdepth {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `dir`, relative path and contents, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

/// Run every subcommand in order into `out`.
pub fn run_pipeline(config: &Path, out: &Path) -> Vec<String> {
    let c = config.to_str().unwrap();
    let o = out.to_str().unwrap();
    let mut stdout = Vec::new();
    for sub in ["gen-data", "train-base", "profile", "distill", "evaluate", "noise-study"] {
        stdout.push(run_ok(&[sub, "--config", c, "--out", o]));
    }
    stdout.push(run_ok(&["ablate", "--config", c, "--out", o, "--axis", "k", "--values", "1,5"]));
    stdout.push(run_ok(&["report", "--config", c, "--out", o]));
    stdout
}

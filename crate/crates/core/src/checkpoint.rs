//! Versioned JSON checkpoints: a small header describing the shapes followed
//! by the flat parameter vector. Floats are written with round-trip precision,
//! so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Parameters;
use crate::policy::{PolicyConfig, PolicyModel};
use crate::profiler::StaticSet;
use crate::runtime::{SkipConfig, SkipModules};

pub const FORMAT: &str = "skipdepth-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<H> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub header: H,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipHeader {
    pub hidden: usize,
    pub tau: f64,
    pub static_set: StaticSet,
}

fn wrap<H>(kind: &str, header: H, params: Vec<f64>) -> Checkpoint<H> {
    Checkpoint {
        format: FORMAT.to_string(),
        version: VERSION,
        kind: kind.to_string(),
        header,
        params,
    }
}

fn unwrap<H: DeserializeOwned>(text: &str, kind: &str) -> Result<(H, Vec<f64>)> {
    let ck: Checkpoint<H> = serde_json::from_str(text)?;
    if ck.format != FORMAT {
        return Err(Error::Integrity(format!("not a checkpoint (format `{}`)", ck.format)));
    }
    if ck.version != VERSION {
        return Err(Error::Integrity(format!("unsupported checkpoint version {}", ck.version)));
    }
    if ck.kind != kind {
        return Err(Error::Integrity(format!("expected a {kind} checkpoint, found {}", ck.kind)));
    }
    Ok((ck.header, ck.params))
}

pub fn model_to_json(model: &PolicyModel) -> Result<String> {
    Ok(serde_json::to_string(&wrap("policy", model.config, model.to_flat()))?)
}

pub fn model_from_json(text: &str) -> Result<PolicyModel> {
    let (config, params): (PolicyConfig, _) = unwrap(text, "policy")?;
    let mut model = PolicyModel::build(config)?;
    model.load_flat(&params)?;
    Ok(model)
}

pub fn skip_to_json(mods: &SkipModules, hidden: usize) -> Result<String> {
    let header = SkipHeader {
        hidden,
        tau: mods.tau,
        static_set: mods.static_set.clone(),
    };
    Ok(serde_json::to_string(&wrap("skip-modules", header, mods.to_flat()))?)
}

pub fn skip_from_json(text: &str) -> Result<SkipModules> {
    let (h, params): (SkipHeader, _) = unwrap(text, "skip-modules")?;
    let mut mods = SkipModules::shaped(h.hidden, h.static_set, SkipConfig { tau: h.tau, seed: 0 })?;
    mods.load_flat(&params)?;
    Ok(mods)
}

pub fn save_model(path: &Path, model: &PolicyModel) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PolicyModel> {
    model_from_json(&fs::read_to_string(path)?)
}

pub fn save_skip(path: &Path, mods: &SkipModules, hidden: usize) -> Result<()> {
    fs::write(path, skip_to_json(mods, hidden)?)?;
    Ok(())
}

pub fn load_skip(path: &Path) -> Result<SkipModules> {
    skip_from_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_bit_exact() {
        let model = PolicyModel::build(PolicyConfig {
            seed: 42,
            ..PolicyConfig::default()
        })
        .unwrap();
        let text = model_to_json(&model).unwrap();
        let back = model_from_json(&text).unwrap();
        let a: Vec<u64> = model.to_flat().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = back.to_flat().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(model_to_json(&back).unwrap(), text);
    }

    #[test]
    fn skip_round_trip_and_kind_check() {
        let model = PolicyModel::build(PolicyConfig::default()).unwrap();
        let ss = StaticSet::new(12, vec![3, 7, 11]).unwrap();
        let mods = SkipModules::init(&model, ss, SkipConfig { tau: 0.4, seed: 5 }).unwrap();
        let text = skip_to_json(&mods, 64).unwrap();
        let back = skip_from_json(&text).unwrap();
        assert_eq!(back, mods);
        assert!(model_from_json(&text).is_err());
        assert!(skip_from_json("{\"format\":\"x\"}").is_err());
    }
}

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SkipModules;
use crate::error::{Error, Result};
use crate::policy::PolicyModel;

/// What happened during one inference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecTrace {
    /// Executed block ids, strictly increasing.
    pub executed: Vec<usize>,
    /// Dynamic layers whose adapter replaced the rest of their segment.
    pub adapters: Vec<usize>,
    /// `(layer, gate)` for every controller evaluated, in order.
    pub controllers: Vec<(usize, f64)>,
    /// Index of every segment that was cut short.
    pub skipped_segments: Vec<usize>,
    /// The step was re-predicted with the full model.
    pub verified: bool,
    /// Total floating point operations, including a discarded first pass.
    pub flops: u64,
    /// The skipped pass that verification threw away.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub discarded: Option<Box<ExecTrace>>,
}

impl ExecTrace {
    pub fn executed_layers(&self) -> usize {
        self.executed.len()
    }

    /// Replace this trace by a full re-run while keeping the cost of the
    /// original pass.
    pub fn into_verified(self, rerun: ExecTrace) -> ExecTrace {
        let flops = rerun.flops + self.flops;
        ExecTrace {
            verified: true,
            flops,
            discarded: Some(Box::new(self)),
            ..rerun
        }
    }
}

/// Which dynamic layers may be skipped for one inference.
pub enum Gating<'a> {
    /// Every block executes; no controllers run.
    Full,
    /// Controllers active from each segment's allow point onward.
    Controllers { allow: &'a [usize] },
    /// Each dynamic layer is independently bypassed with probability `prob`.
    /// No adapter stands in and the segment continues with the next layer.
    Random { prob: f64, rng: &'a mut ChaCha8Rng },
}

/// Run the blocks on an embedded state. Returns the final hidden state and the
/// trace; `trace.flops` covers blocks, adapters and controllers only.
pub fn forward_with_gating(model: &PolicyModel, mods: &SkipModules, x0: &[f64], mut gating: Gating<'_>) -> Result<(Vec<f64>, ExecTrace)> {
    let depth = model.depth();
    if mods.static_set.depth() != depth {
        return Err(Error::Shape(format!(
            "skip modules built for depth {}, model has {}",
            mods.static_set.depth(),
            depth
        )));
    }
    let segments = mods.segments();
    if let Gating::Controllers { allow } = &gating {
        if allow.len() != segments.len() {
            return Err(Error::Shape(format!(
                "{} allow points for {} segments",
                allow.len(),
                segments.len()
            )));
        }
    }

    let mut trace = ExecTrace::default();
    let mut macs = 0u64;
    let mut x = x0.to_vec();
    for (si, seg) in segments.iter().enumerate() {
        let mut layer = seg.start;
        while layer < seg.static_layer {
            let unit = mods
                .unit(layer)
                .ok_or_else(|| Error::Integrity(format!("dynamic layer {layer} has no skip unit")))?;
            let skip = match &mut gating {
                Gating::Full => false,
                Gating::Controllers { allow } => {
                    if layer >= allow[si] {
                        let g = unit.controller.forward(&x);
                        macs += unit.controller.macs();
                        trace.controllers.push((layer, g));
                        g > mods.tau
                    } else {
                        false
                    }
                }
                Gating::Random { prob, rng } => {
                    if rng.random::<f64>() < *prob {
                        if trace.skipped_segments.last() != Some(&si) {
                            trace.skipped_segments.push(si);
                        }
                        layer += 1;
                        continue;
                    }
                    false
                }
            };
            if skip {
                x = unit.adapter.forward(&x);
                macs += unit.adapter.macs();
                trace.adapters.push(layer);
                trace.skipped_segments.push(si);
                break;
            }
            x = model.blocks[layer].forward(&x);
            macs += model.blocks[layer].macs();
            trace.executed.push(layer);
            layer += 1;
        }
        let s = seg.static_layer;
        x = model.blocks[s].forward(&x);
        macs += model.blocks[s].macs();
        trace.executed.push(s);
    }
    trace.flops = 2 * macs;
    Ok((x, trace))
}

/// Full inference from observation to action under the given gating.
pub fn forward_skipped(model: &PolicyModel, mods: &SkipModules, obs: &[f64], instr: &[f64], gating: Gating<'_>) -> Result<(Vec<f64>, ExecTrace)> {
    let x0 = model.embed_input(obs, instr)?;
    let (x, mut trace) = forward_with_gating(model, mods, &x0, gating)?;
    trace.flops += 2 * (model.embed.macs() + model.head.macs());
    Ok((model.head_output(&x), trace))
}

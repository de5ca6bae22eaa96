//! Compute accounting. Latency is reported as floating point operations
//! (two per multiply-accumulate; bias adds are not counted) rather than
//! wall-clock time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::PolicyModel;
use crate::profiler::StaticSet;
use crate::runtime::{ExecTrace, SkipModules};

/// Per-component FLOP costs for one architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    pub embed: u64,
    pub head: u64,
    pub blocks: Vec<u64>,
    /// Indexed by layer; zero for static layers.
    pub adapters: Vec<u64>,
    pub controllers: Vec<u64>,
    pub static_set: StaticSet,
}

impl FlopModel {
    pub fn new(model: &PolicyModel, mods: &SkipModules) -> Self {
        let per_layer = |f: &dyn Fn(&crate::runtime::SkipUnit) -> u64| -> Vec<u64> {
            (0..model.depth()).map(|l| mods.unit(l).map_or(0, f) * 2).collect()
        };
        FlopModel {
            embed: 2 * model.embed.macs(),
            head: 2 * model.head.macs(),
            blocks: model.blocks.iter().map(|b| 2 * b.macs()).collect(),
            adapters: per_layer(&|u| u.adapter.macs()),
            controllers: per_layer(&|u| u.controller.macs()),
            static_set: mods.static_set.clone(),
        }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn full(&self) -> u64 {
        self.embed + self.head + self.blocks.iter().sum::<u64>()
    }

    /// Embedding, head and static blocks only.
    pub fn static_floor(&self) -> u64 {
        self.embed + self.head + self.static_set.layers().iter().map(|&l| self.blocks[l]).sum::<u64>()
    }

    /// Recompute the cost of a trace from its layer lists, checking that the
    /// trace is something this architecture could have produced.
    pub fn estimate(&self, trace: &ExecTrace) -> Result<u64> {
        let mut total = self.single_pass(trace)?;
        if trace.verified {
            if trace.executed.len() != self.depth() {
                return Err(Error::Integrity("verified step did not run every block".into()));
            }
            if let Some(first) = &trace.discarded {
                total += self.single_pass(first)?;
            }
        } else if trace.discarded.is_some() {
            return Err(Error::Integrity("discarded pass on an unverified step".into()));
        }
        Ok(total)
    }

    fn single_pass(&self, trace: &ExecTrace) -> Result<u64> {
        let depth = self.depth();
        if trace.executed.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Integrity("executed layers not strictly increasing".into()));
        }
        if let Some(&l) = trace.executed.iter().find(|&&l| l >= depth) {
            return Err(Error::Integrity(format!("layer {l} out of range")));
        }
        if let Some(&s) = self.static_set.layers().iter().find(|s| !trace.executed.contains(s)) {
            return Err(Error::Integrity(format!("static layer {s} missing from trace")));
        }
        let dynamic = |l: usize, what: &str| -> Result<()> {
            if l >= depth || self.static_set.contains(l) {
                Err(Error::Integrity(format!("{what} at non-dynamic layer {l}")))
            } else {
                Ok(())
            }
        };
        let mut total = self.embed + self.head;
        for &l in &trace.executed {
            total += self.blocks[l];
        }
        for &l in &trace.adapters {
            dynamic(l, "adapter")?;
            if trace.executed.contains(&l) {
                return Err(Error::Integrity(format!("layer {l} both executed and skipped")));
            }
            total += self.adapters[l];
        }
        for &(l, _) in &trace.controllers {
            dynamic(l, "controller")?;
            total += self.controllers[l];
        }
        Ok(total)
    }
}

//! Dynamic-static skipping inference.
//!
//! Static layers always run. Before each dynamic layer past its segment's
//! skipping-allow point a controller scores the hidden state; above the
//! threshold the segment's remaining dynamic layers are replaced by that
//! layer's adapter and execution jumps to the segment's static layer. Allow
//! points move with the continuity of recent actions, and the first step of a
//! continuity drop is re-predicted without skipping.

mod exec;
mod guidance;
mod rollout;

pub use exec::{forward_skipped, forward_with_gating, ExecTrace, Gating};
pub use guidance::{continuity, AllowPointMove, AllowPoints, Continuity, DeltaLMode, GuidanceState, VerifyGate};
pub use rollout::{
    calibrate_random_skip, expected_random_skip_flops, rollout_episode, Episode, Mode, RolloutConfig,
    Session, StepOutput, StepRecord,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Parameters};
use crate::policy::{Affine, PolicyModel, ResidualMlp};
use crate::profiler::{Segment, StaticSet};

pub const DEFAULT_TAU: f64 = 0.5;

/// `g = sigmoid(fc2(tanh(fc1(x))))`, a scalar skip probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    pub fc1: Affine,
    pub fc2: Affine,
}

impl Controller {
    pub fn init(dim: usize, inner: usize, rng: &mut ChaCha8Rng) -> Self {
        Controller {
            fc1: Affine::init(inner, dim, rng),
            fc2: Affine::init(1, inner, rng),
        }
    }

    pub fn inner(&self) -> usize {
        self.fc1.out_dim()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut hidden = vec![0.0; self.inner()];
        self.forward_cached(x, &mut hidden)
    }

    pub fn forward_cached(&self, x: &[f64], hidden: &mut [f64]) -> f64 {
        self.fc1.apply_into(x, hidden);
        for h in hidden.iter_mut() {
            *h = h.tanh();
        }
        let mut z = [0.0];
        self.fc2.apply_into(hidden, &mut z);
        sigmoid(z[0])
    }

    /// Backward from `dL/dg`; returns `dL/dx`.
    pub fn backward(&self, x: &[f64], hidden: &[f64], gate: f64, grad_gate: f64, grads: Option<&mut Controller>) -> Vec<f64> {
        let gz = [grad_gate * gate * (1.0 - gate)];
        let mut ghidden = vec![0.0; self.inner()];
        let (g1, g2) = match grads {
            Some(g) => (Some(&mut g.fc1), Some(&mut g.fc2)),
            None => (None, None),
        };
        self.fc2.backward(hidden, &gz, Some(&mut ghidden), g2);
        for (g, h) in ghidden.iter_mut().zip(hidden) {
            *g *= 1.0 - h * h;
        }
        let mut gx = vec![0.0; x.len()];
        self.fc1.backward(x, &ghidden, Some(&mut gx), g1);
        gx
    }

    pub fn macs(&self) -> u64 {
        self.fc1.macs() + self.fc2.macs()
    }
}

impl Parameters for Controller {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Adapter and controller attached in front of one dynamic layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipUnit {
    pub layer: usize,
    /// Summarizes layers `layer..next_static` in one residual bottleneck.
    pub adapter: ResidualMlp,
    pub controller: Controller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipModules {
    pub static_set: StaticSet,
    pub tau: f64,
    /// Indexed by layer id; `None` for static layers.
    pub units: Vec<Option<SkipUnit>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkipConfig {
    pub tau: f64,
    pub seed: u64,
}

impl Default for SkipConfig {
    fn default() -> Self {
        SkipConfig {
            tau: DEFAULT_TAU,
            seed: 0,
        }
    }
}

impl SkipModules {
    /// Adapters are `d -> d/4 -> d`, controllers `d -> d/8 -> 1`.
    pub fn init(model: &PolicyModel, static_set: StaticSet, cfg: SkipConfig) -> Result<Self> {
        if static_set.depth() != model.depth() {
            return Err(Error::Shape(format!(
                "static set for depth {} applied to depth {}",
                static_set.depth(),
                model.depth()
            )));
        }
        Self::shaped(model.hidden(), static_set, cfg)
    }

    /// Same as [`SkipModules::init`] given only the hidden width.
    pub fn shaped(d: usize, static_set: StaticSet, cfg: SkipConfig) -> Result<Self> {
        if !(cfg.tau > 0.0 && cfg.tau < 1.0) {
            return Err(Error::config("tau", "must be in (0, 1)"));
        }
        let adapter_dim = (d / 4).max(1);
        let controller_dim = (d / 8).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let units = (0..static_set.depth())
            .map(|layer| {
                (!static_set.contains(layer)).then(|| SkipUnit {
                    layer,
                    adapter: ResidualMlp::init(d, adapter_dim, &mut rng),
                    controller: Controller::init(d, controller_dim, &mut rng),
                })
            })
            .collect();
        Ok(SkipModules {
            static_set,
            tau: cfg.tau,
            units,
        })
    }

    pub fn unit(&self, layer: usize) -> Option<&SkipUnit> {
        self.units.get(layer).and_then(|u| u.as_ref())
    }

    pub fn unit_mut(&mut self, layer: usize) -> Option<&mut SkipUnit> {
        self.units.get_mut(layer).and_then(|u| u.as_mut())
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.static_set.segments()
    }

    pub fn hidden(&self) -> usize {
        self.units.iter().flatten().next().map_or(0, |u| u.adapter.dim())
    }

    pub fn num_dynamic(&self) -> usize {
        self.units.iter().flatten().count()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

impl Parameters for SkipModules {
    fn visit(&self, f: &mut dyn FnMut(&[f64])) {
        for u in self.units.iter().flatten() {
            u.adapter.visit(f);
            u.controller.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for u in self.units.iter_mut().flatten() {
            u.adapter.visit_mut(f);
            u.controller.visit_mut(f);
        }
    }
}

//! Continuity tracking, skipping-allow points and the post-skip verification
//! trigger.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::distance;
use crate::profiler::Segment;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Continuity {
    pub value: f64,
    /// Fewer than `k + 1` actions were available.
    pub warmup: bool,
}

/// `C_t = -(1/k) Σ ||A_j - A_{j-1}||` over the last `k` action differences.
/// With a short window the mean runs over the available differences.
pub fn continuity(window: &[Vec<f64>], k: usize) -> Continuity {
    let k = k.max(1);
    let start = window.len().saturating_sub(k + 1);
    let recent = &window[start..];
    let pairs = recent.len().saturating_sub(1);
    if pairs == 0 {
        return Continuity {
            value: 0.0,
            warmup: true,
        };
    }
    let total: f64 = recent.windows(2).map(|w| distance(&w[1], &w[0])).sum();
    Continuity {
        value: -total / pairs as f64,
        warmup: pairs < k,
    }
}

/// How far allow points advance on a continuity drop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DeltaLMode {
    /// `ceil(|ΔC| / η)`.
    #[default]
    Adaptive,
    Const(usize),
}

impl DeltaLMode {
    pub fn stride(self, delta_c: f64, eta: f64) -> usize {
        match self {
            DeltaLMode::Adaptive => ((delta_c.abs() / eta).ceil() as usize).max(1),
            DeltaLMode::Const(n) => n,
        }
    }
}

impl fmt::Display for DeltaLMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeltaLMode::Adaptive => write!(f, "adaptive"),
            DeltaLMode::Const(n) => write!(f, "const:{n}"),
        }
    }
}

impl FromStr for DeltaLMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "adaptive" {
            return Ok(DeltaLMode::Adaptive);
        }
        let n = s
            .strip_prefix("const:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| *n >= 1)
            .ok_or_else(|| Error::config("delta_l_mode", format!("`{s}` is not `adaptive` or `const:N`")))?;
        Ok(DeltaLMode::Const(n))
    }
}

impl Serialize for DeltaLMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DeltaLMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllowPointMove {
    Advance(usize),
    Retreat,
    Hold,
}

/// One allow point per segment, `start <= l <= static_layer`. Controllers are
/// active for dynamic layers at or after `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllowPoints {
    segments: Vec<Segment>,
    points: Vec<usize>,
}

impl AllowPoints {
    /// Every point right after the preceding static layer.
    pub fn new(segments: Vec<Segment>) -> Self {
        let points = segments.iter().map(|s| s.start).collect();
        AllowPoints { segments, points }
    }

    pub fn points(&self) -> &[usize] {
        &self.points
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn reset(&mut self) {
        for (p, s) in self.points.iter_mut().zip(&self.segments) {
            *p = s.start;
        }
    }

    /// Drop beyond `-η` advances every point by the stride (clamped at the
    /// static layer); rise beyond `η` retreats every point by one (clamped at
    /// the segment start); otherwise nothing moves.
    pub fn update(&mut self, delta_c: f64, eta: f64, mode: DeltaLMode) -> AllowPointMove {
        if delta_c < -eta {
            let stride = mode.stride(delta_c, eta);
            for (p, s) in self.points.iter_mut().zip(&self.segments) {
                *p = (*p + stride).min(s.static_layer);
            }
            AllowPointMove::Advance(stride)
        } else if delta_c > eta {
            for (p, s) in self.points.iter_mut().zip(&self.segments) {
                *p = p.saturating_sub(1).max(s.start);
            }
            AllowPointMove::Retreat
        } else {
            AllowPointMove::Hold
        }
    }

    pub fn is_confined(&self) -> bool {
        self.points
            .iter()
            .zip(&self.segments)
            .all(|(p, s)| s.start <= *p && *p <= s.static_layer)
    }
}

/// Fires on the first step of a continuity drop: `δC_t < -η` while the
/// previous change was not a drop. Stays disarmed until `δC` is back at or
/// above `-η`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerifyGate {
    armed: bool,
}

impl Default for VerifyGate {
    fn default() -> Self {
        VerifyGate { armed: true }
    }
}

impl VerifyGate {
    pub fn should_verify(&self, delta_c: f64, eta: f64) -> bool {
        self.armed && delta_c < -eta
    }

    /// Record the final `δC_t` of the step (after any re-prediction).
    pub fn settle(&mut self, delta_c: f64, eta: f64) {
        self.armed = delta_c >= -eta;
    }

    /// Convenience for scripted sequences without re-prediction.
    pub fn observe(&mut self, delta_c: f64, eta: f64) -> bool {
        let fire = self.should_verify(delta_c, eta);
        self.settle(delta_c, eta);
        fire
    }
}

/// Per-episode guidance state: recent actions, continuity history, allow
/// points and the verification trigger.
#[derive(Debug, Clone)]
pub struct GuidanceState {
    pub k: usize,
    pub allow: AllowPoints,
    pub gate: VerifyGate,
    window: VecDeque<Vec<f64>>,
    c_prev: Option<f64>,
    c_curr: Option<f64>,
    steps: usize,
}

impl GuidanceState {
    pub fn new(segments: Vec<Segment>, k: usize) -> Self {
        GuidanceState {
            k: k.max(1),
            allow: AllowPoints::new(segments),
            gate: VerifyGate::default(),
            window: VecDeque::with_capacity(k + 2),
            c_prev: None,
            c_curr: None,
            steps: 0,
        }
    }

    /// Skipping is off until `k + 1` actions have been produced.
    pub fn in_warmup(&self) -> bool {
        self.steps < self.k + 1
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn current(&self) -> Option<f64> {
        self.c_curr
    }

    pub fn previous(&self) -> Option<f64> {
        self.c_prev
    }

    fn window_vec(&self) -> Vec<Vec<f64>> {
        self.window.iter().cloned().collect()
    }

    /// Append `A_t` and return `C_t`.
    pub fn push_action(&mut self, action: &[f64]) -> Continuity {
        self.window.push_back(action.to_vec());
        while self.window.len() > self.k + 1 {
            self.window.pop_front();
        }
        self.steps += 1;
        let c = continuity(&self.window_vec(), self.k);
        self.c_prev = self.c_curr;
        self.c_curr = Some(c.value);
        c
    }

    /// Replace `A_t` (after re-prediction) and recompute `C_t`.
    pub fn replace_last(&mut self, action: &[f64]) -> Continuity {
        if let Some(last) = self.window.back_mut() {
            *last = action.to_vec();
        }
        let c = continuity(&self.window_vec(), self.k);
        self.c_curr = Some(c.value);
        c
    }

    /// `C_t - C_{t-1}` once both come from full windows.
    pub fn delta(&self) -> Option<f64> {
        if self.steps < self.k + 2 {
            return None;
        }
        Some(self.c_curr? - self.c_prev?)
    }
}

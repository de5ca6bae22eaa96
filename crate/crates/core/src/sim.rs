//! Planar pick-and-place environment with a scripted expert.
//!
//! A point end-effector with a scalar gripper moves objects to goals in a chain
//! of subtasks. The expert moves at constant speed in free space and switches
//! to slow stop-and-go corrections within the grasp radius of its target, so
//! its action stream is smooth most of the time and broken around grasps and
//! releases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::distance;

/// `(ee.x, ee.y, gripper, object.x, object.y, goal.x, goal.y, holding)`
/// followed by the object and goal offsets from the end-effector in near-field
/// units, `(object - ee) / 2r` and `(goal - ee) / 2r`, clamped to `[-1, 1]`.
pub const OBS_DIM: usize = 12;
/// `(dx, dy, dgrip)`.
pub const ACTION_DIM: usize = 3;

/// Gripper values below this count as closed.
const GRIP_CLOSED: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Square workspace `[0, workspace]²`.
    pub workspace: f64,
    /// Objects and goals are placed at least this far from the walls.
    pub margin: f64,
    pub grasp_radius: f64,
    pub success_tol: f64,
    pub subtasks: usize,
    /// Free-space speed per step.
    pub speed: f64,
    /// Per-axis displacement bound.
    pub d_max: f64,
    pub p_pause: f64,
    /// Std of the smooth lateral noise in free motion.
    pub free_noise: f64,
    /// Heading jitter (radians, uniform half-width) of fine corrections.
    pub heading_jitter: f64,
    /// Gripper command held while not transitioning.
    pub grip_hold: f64,
    pub step_cap_per_subtask: usize,
    /// A release away from the goal ends the chain.
    pub strict_release: bool,
    /// Within the grasp radius of the target, a displacement longer than this
    /// knocks the object over and ends the chain.
    pub knock_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            workspace: 1.0,
            margin: 0.1,
            grasp_radius: 0.05,
            success_tol: 0.04,
            subtasks: 5,
            speed: 0.05,
            d_max: 0.1,
            p_pause: 0.3,
            free_noise: 0.002,
            heading_jitter: 0.4,
            grip_hold: 0.5,
            step_cap_per_subtask: 400,
            strict_release: true,
            knock_speed: 0.05,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sim.workspace", self.workspace),
            ("sim.grasp_radius", self.grasp_radius),
            ("sim.success_tol", self.success_tol),
            ("sim.speed", self.speed),
            ("sim.d_max", self.d_max),
            ("sim.knock_speed", self.knock_speed),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.subtasks == 0 {
            return Err(Error::config("sim.subtasks", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.p_pause) {
            return Err(Error::config("sim.p_pause", "must be in [0, 1)"));
        }
        if self.speed > self.d_max {
            return Err(Error::config("sim.speed", "exceeds d_max"));
        }
        if self.knock_speed <= 0.25 * self.speed {
            return Err(Error::config("sim.knock_speed", "must exceed the fine step length speed/4"));
        }
        if self.step_cap_per_subtask == 0 {
            return Err(Error::config("sim.step_cap_per_subtask", "must be at least 1"));
        }
        let span = self.workspace - 2.0 * self.margin;
        if span <= 0.0 || 4.0 * self.grasp_radius > 0.7 * span {
            return Err(Error::config(
                "sim.grasp_radius",
                "workspace too small for the 4r placement separation",
            ));
        }
        Ok(())
    }

    /// Release radius of the expert, inside the success tolerance.
    fn release_radius(&self) -> f64 {
        0.5 * self.success_tol
    }

    /// Grasp radius the expert waits for before closing.
    fn ready_radius(&self) -> f64 {
        0.5 * self.grasp_radius
    }

    /// Scale from environment actions to the unit-scale vectors the policy
    /// predicts.
    pub fn action_scale(&self) -> [f64; ACTION_DIM] {
        [self.d_max, self.d_max, 1.0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Subtask {
    pub object: [f64; 2],
    pub goal: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub seed: u64,
    pub workspace: f64,
    pub grasp_radius: f64,
    pub success_tol: f64,
    pub ee_start: [f64; 2],
    pub subtasks: Vec<Subtask>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.subtasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subtasks.is_empty()
    }
}

/// Deterministic per seed. Each object is at least `4r` from its goal and
/// from the previous goal.
pub fn sample_task_sequence(seed: u64, cfg: &SimConfig) -> Result<Task> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_0b1e_c7ed_0001);
    let lo = cfg.margin;
    let hi = cfg.workspace - cfg.margin;
    let sep = 4.0 * cfg.grasp_radius;
    let draw = |rng: &mut ChaCha8Rng| [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
    let ee_start = draw(&mut rng);
    let mut subtasks = Vec::with_capacity(cfg.subtasks);
    let mut anchor = ee_start;
    for j in 0..cfg.subtasks {
        let mut placed = None;
        for _ in 0..10_000 {
            let object = draw(&mut rng);
            let goal = draw(&mut rng);
            if distance(&object, &goal) >= sep && distance(&object, &anchor) >= sep {
                placed = Some(Subtask { object, goal });
                break;
            }
        }
        let st = placed.ok_or_else(|| Error::config("sim", format!("could not place subtask {j}")))?;
        anchor = st.goal;
        subtasks.push(st);
    }
    Ok(Task {
        seed,
        workspace: cfg.workspace,
        grasp_radius: cfg.grasp_radius,
        success_tol: cfg.success_tol,
        ee_start,
        subtasks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub ee: [f64; 2],
    /// 1 = open, 0 = closed.
    pub gripper: f64,
    pub holding: bool,
    pub object: [f64; 2],
    pub subtask: usize,
    pub step: usize,
    pub subtask_steps: usize,
    pub completed: Vec<bool>,
    pub failed: bool,
}

impl EnvState {
    pub fn initial(task: &Task) -> Self {
        EnvState {
            ee: task.ee_start,
            gripper: 1.0,
            holding: false,
            object: task.subtasks[0].object,
            subtask: 0,
            step: 0,
            subtask_steps: 0,
            completed: vec![false; task.len()],
            failed: false,
        }
    }

    pub fn goal<'a>(&self, task: &'a Task) -> &'a [f64; 2] {
        &task.subtasks[self.subtask.min(task.len() - 1)].goal
    }

    /// Where the expert is heading: the object, or the goal while holding.
    pub fn target(&self, task: &Task) -> [f64; 2] {
        if self.holding {
            *self.goal(task)
        } else {
            self.object
        }
    }

    pub fn done(&self, task: &Task) -> bool {
        self.failed || self.subtask >= task.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Phase {
    Free,
    Fine,
}

pub fn phase(task: &Task, state: &EnvState) -> Phase {
    if distance(&state.ee, &state.target(task)) > task.grasp_radius {
        Phase::Free
    } else {
        Phase::Fine
    }
}

/// Environment-unit action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub dgrip: f64,
}

impl Action {
    pub const ZERO: Action = Action {
        dx: 0.0,
        dy: 0.0,
        dgrip: 0.0,
    };

    pub fn to_array(self) -> [f64; ACTION_DIM] {
        [self.dx, self.dy, self.dgrip]
    }

    /// From a policy output in unit scale.
    pub fn from_policy(output: &[f64], cfg: &SimConfig) -> Action {
        let s = cfg.action_scale();
        Action {
            dx: output[0] * s[0],
            dy: output[1] * s[1],
            dgrip: output[2] * s[2],
        }
    }

    /// Unit-scale training target.
    pub fn to_policy(self, cfg: &SimConfig) -> Vec<f64> {
        let s = cfg.action_scale();
        vec![self.dx / s[0], self.dy / s[1], self.dgrip / s[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    Grasp,
    Release,
    SubtaskSuccess(usize),
    /// Released away from the goal under `strict_release`.
    Dropped(usize),
    Timeout(usize),
    /// Moved too fast near the target.
    Knocked(usize),
}

/// Kinematic step with clamping.
pub fn env_step(task: &Task, cfg: &SimConfig, state: &EnvState, action: Action) -> Result<(EnvState, Vec<Event>)> {
    if !(action.dx.is_finite() && action.dy.is_finite() && action.dgrip.is_finite()) {
        return Err(Error::Env(format!("non-finite action {action:?}")));
    }
    let mut next = state.clone();
    let mut events = Vec::new();
    if state.done(task) {
        return Ok((next, events));
    }
    let dx = action.dx.clamp(-cfg.d_max, cfg.d_max);
    let dy = action.dy.clamp(-cfg.d_max, cfg.d_max);
    if phase(task, state) == Phase::Fine && (dx * dx + dy * dy).sqrt() > cfg.knock_speed {
        next.failed = true;
        next.step += 1;
        events.push(Event::Knocked(state.subtask));
        return Ok((next, events));
    }
    next.ee = [
        (state.ee[0] + dx).clamp(0.0, task.workspace),
        (state.ee[1] + dy).clamp(0.0, task.workspace),
    ];
    next.gripper = (state.gripper + action.dgrip.clamp(-1.0, 1.0)).clamp(0.0, 1.0);
    if next.holding {
        next.object = next.ee;
    }
    let closed_now = state.gripper >= GRIP_CLOSED && next.gripper < GRIP_CLOSED;
    let opened_now = state.gripper < GRIP_CLOSED && next.gripper >= GRIP_CLOSED;
    if !next.holding && closed_now && distance(&next.ee, &next.object) <= task.grasp_radius {
        next.holding = true;
        next.object = next.ee;
        events.push(Event::Grasp);
    } else if next.holding && opened_now {
        next.holding = false;
        events.push(Event::Release);
        let j = next.subtask;
        if distance(&next.object, &task.subtasks[j].goal) <= task.success_tol {
            next.completed[j] = true;
            next.subtask += 1;
            next.subtask_steps = 0;
            events.push(Event::SubtaskSuccess(j));
            if next.subtask < task.len() {
                next.object = task.subtasks[next.subtask].object;
            }
        } else if cfg.strict_release {
            next.failed = true;
            events.push(Event::Dropped(j));
        }
    }
    next.step += 1;
    if !next.done(task) {
        next.subtask_steps += 1;
        if next.subtask_steps >= cfg.step_cap_per_subtask {
            next.failed = true;
            events.push(Event::Timeout(next.subtask));
        }
    }
    Ok((next, events))
}

/// Policy observation, positions and flags mapped to `[-1, 1]`. The near-field
/// offsets resolve the last few millimetres of an approach that the absolute
/// coordinates alone leave to a difference of two large inputs.
pub fn observe(task: &Task, state: &EnvState) -> Vec<f64> {
    let s = |v: f64| 2.0 * v / task.workspace - 1.0;
    let near = |a: f64, b: f64| ((a - b) / (2.0 * task.grasp_radius)).clamp(-1.0, 1.0);
    let goal = state.goal(task);
    vec![
        s(state.ee[0]),
        s(state.ee[1]),
        2.0 * state.gripper - 1.0,
        s(state.object[0]),
        s(state.object[1]),
        s(goal[0]),
        s(goal[1]),
        if state.holding { 1.0 } else { -1.0 },
        near(state.object[0], state.ee[0]),
        near(state.object[1], state.ee[1]),
        near(goal[0], state.ee[0]),
        near(goal[1], state.ee[1]),
    ]
}

/// One-hot id of the active subtask.
pub fn instruction(task: &Task, state: &EnvState) -> Vec<f64> {
    let mut v = vec![0.0; task.len()];
    v[state.subtask.min(task.len() - 1)] = 1.0;
    v
}

/// Scripted demonstrator. Carries the lateral noise state so free motion noise
/// is smooth.
#[derive(Debug, Clone)]
pub struct Expert {
    cfg: SimConfig,
    lateral: f64,
}

impl Expert {
    pub fn new(cfg: SimConfig) -> Self {
        Expert { cfg, lateral: 0.0 }
    }

    pub fn act<R: Rng + ?Sized>(&mut self, task: &Task, state: &EnvState, rng: &mut R) -> (Action, Phase) {
        let cfg = &self.cfg;
        let target = state.target(task);
        let to = [target[0] - state.ee[0], target[1] - state.ee[1]];
        let dist = (to[0] * to[0] + to[1] * to[1]).sqrt();
        let hold = if state.holding { -cfg.grip_hold } else { cfg.grip_hold };
        let phase = phase(task, state);
        if phase == Phase::Free {
            let dir = [to[0] / dist, to[1] / dist];
            let normal = Normal::new(0.0, cfg.free_noise.max(1e-12)).unwrap();
            self.lateral = 0.8 * self.lateral + normal.sample(rng);
            let perp = [-dir[1], dir[0]];
            return (
                Action {
                    dx: cfg.speed * dir[0] + self.lateral * perp[0],
                    dy: cfg.speed * dir[1] + self.lateral * perp[1],
                    dgrip: hold,
                },
                phase,
            );
        }
        self.lateral = 0.0;
        if rng.random_bool(cfg.p_pause) {
            return (
                Action {
                    dx: 0.0,
                    dy: 0.0,
                    dgrip: hold,
                },
                phase,
            );
        }
        let finish_radius = if state.holding {
            cfg.release_radius()
        } else {
            cfg.ready_radius()
        };
        let len = (0.25 * cfg.speed).min(dist);
        if dist <= finish_radius {
            // Keep closing in on the target while the gripper switches.
            let dgrip = if state.holding { 1.0 } else { -1.0 };
            let k = if dist > 0.0 { len / dist } else { 0.0 };
            return (
                Action {
                    dx: k * to[0],
                    dy: k * to[1],
                    dgrip,
                },
                phase,
            );
        }
        let jitter = rng.random_range(-cfg.heading_jitter..=cfg.heading_jitter);
        let (s, c) = jitter.sin_cos();
        let dir = [to[0] / dist, to[1] / dist];
        let rot = [c * dir[0] - s * dir[1], s * dir[0] + c * dir[1]];
        (
            Action {
                dx: len * rot[0],
                dy: len * rot[1],
                dgrip: hold,
            },
            phase,
        )
    }
}

/// Standalone form of [`Expert::act`] with fresh noise state.
pub fn expert_action<R: Rng + ?Sized>(task: &Task, cfg: &SimConfig, state: &EnvState, rng: &mut R) -> Action {
    Expert::new(*cfg).act(task, state, rng).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Score {
    pub successful_length: usize,
    pub success: bool,
}

/// Counts completed subtasks from the start of the chain.
pub fn score_rollout(task: &Task, completed: &[bool]) -> Score {
    let successful_length = completed.iter().take_while(|c| **c).count();
    Score {
        successful_length,
        success: successful_length == task.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub episodes: usize,
    pub sim: SimConfig,
    pub obs_dim: usize,
    pub instr_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub episode: usize,
    pub step: usize,
    pub obs: Vec<f64>,
    pub instr_id: usize,
    /// Environment units.
    pub action: Vec<f64>,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
    pub expert_scores: Vec<Score>,
}

impl Dataset {
    /// Training pairs; phases are dropped.
    pub fn samples(&self) -> Vec<crate::policy::Sample> {
        let cfg = &self.header.sim;
        self.records
            .iter()
            .map(|r| {
                let mut instr = vec![0.0; self.header.instr_dim];
                instr[r.instr_id] = 1.0;
                crate::policy::Sample {
                    obs: r.obs.clone(),
                    instr,
                    target: Action {
                        dx: r.action[0],
                        dy: r.action[1],
                        dgrip: r.action[2],
                    }
                    .to_policy(cfg),
                }
            })
            .collect()
    }

    pub fn episode_seed(base: u64, episode: usize) -> u64 {
        base.wrapping_mul(1_000_003).wrapping_add(episode as u64)
    }

    /// JSON lines: header first, then one record per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: DatasetHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::Usage("empty dataset file".into()))?,
        )?;
        let records = lines
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<DatasetRecord>, _>>()?;
        Ok(Dataset {
            header,
            records,
            expert_scores: Vec::new(),
        })
    }
}

/// Flattened expert rollouts over `episodes` sampled tasks.
pub fn generate_dataset(episodes: usize, seed: u64, cfg: &SimConfig) -> Result<Dataset> {
    if episodes == 0 {
        return Err(Error::Usage("dataset needs at least one episode".into()));
    }
    cfg.validate()?;
    let mut records = Vec::new();
    let mut expert_scores = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let ep_seed = Dataset::episode_seed(seed, ep);
        let task = sample_task_sequence(ep_seed, cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(ep_seed ^ 0xe4e7);
        let mut expert = Expert::new(*cfg);
        let mut state = EnvState::initial(&task);
        while !state.done(&task) {
            let (action, phase) = expert.act(&task, &state, &mut rng);
            records.push(DatasetRecord {
                episode: ep,
                step: state.step,
                obs: observe(&task, &state),
                instr_id: state.subtask,
                action: action.to_array().to_vec(),
                phase,
            });
            state = env_step(&task, cfg, &state, action)?.0;
        }
        expert_scores.push(score_rollout(&task, &state.completed));
    }
    Ok(Dataset {
        header: DatasetHeader {
            format: "skipdepth-dataset".into(),
            version: 1,
            seed,
            episodes,
            sim: *cfg,
            obs_dim: OBS_DIM,
            instr_dim: cfg.subtasks,
        },
        records,
        expert_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn task_sampling_is_deterministic_and_separated() {
        let c = cfg();
        assert_eq!(sample_task_sequence(3, &c).unwrap(), sample_task_sequence(3, &c).unwrap());
        assert_eq!(sample_task_sequence(3, &c).unwrap().len(), 5);
        for seed in 0..1000 {
            let t = sample_task_sequence(seed, &c).unwrap();
            let mut anchor = t.ee_start;
            for st in &t.subtasks {
                assert!(distance(&st.object, &st.goal) >= 4.0 * c.grasp_radius);
                assert!(distance(&st.object, &anchor) >= 4.0 * c.grasp_radius);
                for p in [st.object, st.goal] {
                    assert!(p.iter().all(|v| (0.0..=c.workspace).contains(v)));
                }
                anchor = st.goal;
            }
        }
        let tiny = SimConfig {
            workspace: 0.3,
            ..c
        };
        assert!(matches!(sample_task_sequence(0, &tiny), Err(Error::Config { .. })));
    }

    #[test]
    fn free_phase_step_is_straight_at_speed() {
        let c = SimConfig {
            free_noise: 0.0,
            ..cfg()
        };
        let mut task = sample_task_sequence(1, &c).unwrap();
        task.ee_start = [0.2, 0.5];
        task.subtasks[0].object = [0.7, 0.5];
        let state = EnvState::initial(&task);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = expert_action(&task, &c, &state, &mut rng);
        assert!((a.dx - 0.05).abs() < 1e-12 && a.dy.abs() < 1e-12);
    }

    #[test]
    fn env_step_basics() {
        let c = cfg();
        let task = sample_task_sequence(2, &c).unwrap();
        let s0 = EnvState::initial(&task);
        let (s1, ev) = env_step(&task, &c, &s0, Action::ZERO).unwrap();
        assert!(ev.is_empty());
        assert_eq!(s1.step, 1);
        assert_eq!(EnvState { step: 0, subtask_steps: 0, ..s1 }, s0);

        let close = Action {
            dx: 0.0,
            dy: 0.0,
            dgrip: -1.0,
        };
        let (s2, ev) = env_step(&task, &c, &s0, close).unwrap();
        assert!(!s2.holding && ev.is_empty(), "object is far away");

        let nan = Action {
            dx: f64::NAN,
            ..Action::ZERO
        };
        assert!(matches!(env_step(&task, &c, &s0, nan), Err(Error::Env(_))));
    }

    #[test]
    fn scripted_pick_grasps_exactly_at_close() {
        let c = cfg();
        let mut task = sample_task_sequence(4, &c).unwrap();
        task.ee_start = [0.5, 0.5];
        task.subtasks[0].object = [0.53, 0.5];
        let mut s = EnvState::initial(&task);
        let mv = Action {
            dx: 0.02,
            dy: 0.0,
            dgrip: 0.25,
        };
        let close = Action {
            dx: 0.0,
            dy: 0.0,
            dgrip: -1.0,
        };
        let script = [mv, mv, close];
        let mut holding = Vec::new();
        for a in script {
            let (n, ev) = env_step(&task, &c, &s, a).unwrap();
            holding.push(n.holding);
            if a == close {
                assert_eq!(ev, vec![Event::Grasp]);
            }
            s = n;
        }
        assert_eq!(holding, vec![false, false, true]);
        assert_eq!(s.object, s.ee);
    }

    #[test]
    fn expert_solves_tasks_and_separates_phases() {
        let c = cfg();
        let data = generate_dataset(200, 11, &c).unwrap();
        let solved = data.expert_scores.iter().filter(|s| s.success).count();
        assert!(solved as f64 >= 0.99 * 200.0, "expert solved {solved}/200");

        let fine = data.records.iter().filter(|r| r.phase == Phase::Fine).count();
        let frac = fine as f64 / data.records.len() as f64;
        assert!((0.05..=0.40).contains(&frac), "fine fraction {frac}");

        // Mean |dA| by phase of the later action; normalized action units.
        let mut sums = [0.0; 2];
        let mut counts = [0usize; 2];
        for w in data.records.windows(2) {
            if w[0].episode != w[1].episode {
                continue;
            }
            let to = |r: &DatasetRecord| Action { dx: r.action[0], dy: r.action[1], dgrip: r.action[2] }.to_policy(&c);
            let d = distance(&to(&w[1]), &to(&w[0]));
            let k = (w[1].phase == Phase::Fine) as usize;
            sums[k] += d;
            counts[k] += 1;
        }
        let free = sums[0] / counts[0] as f64;
        let fine_mean = sums[1] / counts[1] as f64;
        assert!(fine_mean >= 3.0 * free, "fine {fine_mean} vs free {free}");

        for r in &data.records {
            assert!(r.obs.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dataset_is_reproducible() {
        let c = cfg();
        let a = generate_dataset(3, 5, &c).unwrap().to_jsonl().unwrap();
        let b = generate_dataset(3, 5, &c).unwrap().to_jsonl().unwrap();
        assert_eq!(a, b);
        let parsed = Dataset::from_jsonl(&a).unwrap();
        assert_eq!(parsed.to_jsonl().unwrap(), a);
    }

    #[test]
    fn object_moves_only_while_held() {
        let c = cfg();
        for seed in 0..20 {
            let task = sample_task_sequence(seed, &c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut expert = Expert::new(c);
            let mut s = EnvState::initial(&task);
            while !s.done(&task) {
                let (a, _) = expert.act(&task, &s, &mut rng);
                let (n, ev) = env_step(&task, &c, &s, a).unwrap();
                let advanced = ev.iter().any(|e| matches!(e, Event::SubtaskSuccess(_)));
                if n.object != s.object {
                    assert!(n.holding || s.holding || advanced, "object teleported");
                }
                if n.holding {
                    assert_eq!(n.object, n.ee);
                }
                s = n;
            }
        }
    }

    #[test]
    fn scoring_counts_leading_completions() {
        let task = sample_task_sequence(0, &cfg()).unwrap();
        assert_eq!(score_rollout(&task, &[false; 5]).successful_length, 0);
        assert_eq!(score_rollout(&task, &[false, true, true, false, false]).successful_length, 0);
        let s = score_rollout(&task, &[true; 5]);
        assert_eq!(s.successful_length, 5);
        assert!(s.success);
    }
}

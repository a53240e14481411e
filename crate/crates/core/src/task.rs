//! Parameterised firefly navigation tasks.
//!
//! The 1D task moves the agent along a line with three discrete actions and gives it no
//! observations after the initial target reading. The 2D task is a unicycle with continuous
//! forward/angular controls and noisy self-motion readings. Both share one reward structure:
//! a per-step cost for moving and a hit reward when the agent stops within `radius` of the target.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{IrcError, Result};
use crate::params::ParamSpace;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    #[serde(rename = "firefly_1d")]
    Firefly1d,
    #[serde(rename = "firefly_2d")]
    Firefly2d,
}

impl TaskId {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Firefly1d => "firefly_1d",
            TaskId::Firefly2d => "firefly_2d",
        }
    }

    pub fn parse(s: &str) -> Option<TaskId> {
        match s {
            "firefly_1d" => Some(TaskId::Firefly1d),
            "firefly_2d" => Some(TaskId::Firefly2d),
            _ => None,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            TaskId::Firefly1d => 1,
            TaskId::Firefly2d => 5,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            TaskId::Firefly1d => 1,
            TaskId::Firefly2d => 2,
        }
    }

    pub fn gain_names(self) -> &'static [&'static str] {
        match self {
            TaskId::Firefly1d => &["g_a"],
            TaskId::Firefly2d => &["g_v", "g_w"],
        }
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub radius: f64,
    pub hit_reward: f64,
    pub action_cost: f64,
    pub discount: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpawnBounds {
    /// Range of the initial agent-target distance.
    pub distance: [f64; 2],
    /// Range of the initial target bearing relative to the agent heading (2D only).
    pub bearing: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub task: TaskId,
    pub reward: RewardSpec,
    pub horizon: usize,
    pub dt: f64,
    pub stop_threshold: f64,
    /// Std of the (v, omega) self-motion readings. Known to agent and observer alike.
    pub obs_noise_std: f64,
    pub spawn: SpawnBounds,
    /// Diagonal of the initial belief covariance.
    pub initial_var: Vec<f64>,
    /// Std of the one-off target position reading taken at the start of a trial.
    pub reading_std: f64,
}

impl TaskConfig {
    pub fn firefly_1d() -> Self {
        TaskConfig {
            task: TaskId::Firefly1d,
            reward: RewardSpec {
                radius: 0.5,
                hit_reward: 1.0,
                action_cost: 0.05,
                discount: 0.95,
            },
            horizon: 40,
            dt: 1.0,
            stop_threshold: 0.05,
            obs_noise_std: 0.0,
            spawn: SpawnBounds {
                distance: [1.0, 5.0],
                bearing: [0.0, 0.0],
            },
            initial_var: vec![0.1],
            reading_std: 0.0,
        }
    }

    pub fn firefly_2d() -> Self {
        TaskConfig {
            task: TaskId::Firefly2d,
            reward: RewardSpec {
                radius: 0.6,
                hit_reward: 1.0,
                action_cost: 0.05,
                discount: 0.95,
            },
            horizon: 60,
            dt: 0.5,
            stop_threshold: 0.05,
            obs_noise_std: 0.1,
            spawn: SpawnBounds {
                distance: [1.0, 5.0],
                bearing: [-PI / 4.0, PI / 4.0],
            },
            initial_var: vec![0.05, 0.05, 0.01, 0.01, 0.01],
            reading_std: 0.0,
        }
    }

    pub fn default_for(task: TaskId) -> Self {
        match task {
            TaskId::Firefly1d => Self::firefly_1d(),
            TaskId::Firefly2d => Self::firefly_2d(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(IrcError::Config(m));
        let r = &self.reward;
        if !(r.radius > 0.0) {
            return bad(format!("reward.radius must be > 0, got {}", r.radius));
        }
        if !(r.hit_reward > 0.0) {
            return bad(format!("reward.hit_reward must be > 0, got {}", r.hit_reward));
        }
        if !(r.action_cost >= 0.0) {
            return bad(format!("reward.action_cost must be >= 0, got {}", r.action_cost));
        }
        if !(r.discount > 0.0 && r.discount < 1.0) {
            return bad(format!("reward.discount must lie in (0, 1), got {}", r.discount));
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt must be > 0, got {}", self.dt));
        }
        if !(self.stop_threshold > 0.0) {
            return bad(format!("stop_threshold must be > 0, got {}", self.stop_threshold));
        }
        if !(self.obs_noise_std >= 0.0) || !(self.reading_std >= 0.0) {
            return bad("noise standard deviations must be >= 0".into());
        }
        let [dlo, dhi] = self.spawn.distance;
        if !(dlo >= 0.0 && dlo <= dhi) {
            return bad(format!("spawn.distance must satisfy 0 <= lo <= hi, got [{dlo}, {dhi}]"));
        }
        let [blo, bhi] = self.spawn.bearing;
        if !(blo <= bhi && blo.is_finite() && bhi.is_finite()) {
            return bad("spawn.bearing must satisfy lo <= hi".into());
        }
        let n = self.task.state_dim();
        if self.initial_var.len() != n {
            return bad(format!(
                "initial_var needs {n} entries for {}, got {}",
                self.task,
                self.initial_var.len()
            ));
        }
        if self.initial_var.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("initial_var entries must be positive (covariance must be SPD)".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DiscreteAction {
    Left,
    Right,
    Stop,
}

impl DiscreteAction {
    pub const ALL: [DiscreteAction; 3] = [DiscreteAction::Left, DiscreteAction::Right, DiscreteAction::Stop];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Signed unit displacement.
    pub fn direction(self) -> f64 {
        match self {
            DiscreteAction::Left => -1.0,
            DiscreteAction::Right => 1.0,
            DiscreteAction::Stop => 0.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DiscreteAction::Left => "LEFT",
            DiscreteAction::Right => "RIGHT",
            DiscreteAction::Stop => "STOP",
        }
    }
}

/// Forward and angular controls, each clamped to [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAction {
    pub v: f64,
    pub w: f64,
}

impl ContinuousAction {
    pub fn new(v: f64, w: f64) -> Self {
        ContinuousAction {
            v: v.clamp(-1.0, 1.0),
            w: w.clamp(-1.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Discrete(DiscreteAction),
    Continuous(ContinuousAction),
}

impl Action {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            Action::Discrete(a) => vec![a.index() as f64],
            Action::Continuous(a) => vec![a.v, a.w],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State1d {
    /// Agent position minus target position.
    pub x: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct State2d {
    /// Target position relative to the agent, world frame.
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v: f64,
    pub omega: f64,
}

impl State2d {
    pub fn to_array(&self) -> [f64; 5] {
        [self.x, self.y, self.phi, self.v, self.omega]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        State2d {
            x: s[0],
            y: s[1],
            phi: s[2],
            v: s[3],
            omega: s[4],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WorldState {
    OneD(State1d),
    TwoD(State2d),
}

impl WorldState {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            WorldState::OneD(s) => vec![s.x],
            WorldState::TwoD(s) => s.to_array().to_vec(),
        }
    }

    pub fn from_slice(task: TaskId, v: &[f64]) -> Result<Self> {
        if v.len() != task.state_dim() {
            return Err(IrcError::DimensionMismatch {
                what: "world state",
                expected: task.state_dim(),
                got: v.len(),
            });
        }
        Ok(match task {
            TaskId::Firefly1d => WorldState::OneD(State1d { x: v[0] }),
            TaskId::Firefly2d => WorldState::TwoD(State2d::from_slice(v)),
        })
    }

    fn check_finite(&self) -> Result<()> {
        if self.to_vec().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(IrcError::NonFinite(format!("world state {self:?}")))
        }
    }
}

/// Task-facing view of a parameter vector: control gains and process-noise std.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `[g_a, unused]` for the 1D task, `[g_v, g_w]` for the 2D task.
    pub gains: [T; 2],
    pub sigma0: T,
}

/// Positions of the task's named parameters inside a [`ParamSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    gains: Vec<usize>,
    sigma0: usize,
}

impl ParamLayout {
    pub fn new(space: &ParamSpace, task: TaskId) -> Result<Self> {
        let find = |name: &str| {
            space
                .index_of(name)
                .ok_or_else(|| IrcError::Config(format!("{task} requires a parameter named {name}")))
        };
        let gains = task
            .gain_names()
            .iter()
            .map(|n| find(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(ParamLayout {
            gains,
            sigma0: find("sigma0")?,
        })
    }

    /// Extract from natural-unit values (plain or differentiated).
    pub fn extract<T: Real>(&self, natural: &[T]) -> ModelParams<T> {
        let g0 = natural[self.gains[0]];
        let g1 = self.gains.get(1).map_or(T::cst(0.0), |&i| natural[i]);
        ModelParams {
            gains: [g0, g1],
            sigma0: natural[self.sigma0],
        }
    }
}

/// Result of advancing the world by one action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub reward: f64,
    pub done: bool,
}

/// Wrap an angle to (-pi, pi].
pub fn wrap_angle(phi: f64) -> f64 {
    let mut a = phi % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// Noise-free 1D motion: `x + g_a * direction(a)`.
pub fn drift_1d<T: Real>(x: T, a: DiscreteAction, gain: T) -> T {
    x + gain.scale(a.direction())
}

/// Noise-free 2D motion on `(x, y, phi, v, omega)`.
///
/// Velocities are set by the gained controls, heading integrates the new angular velocity, and
/// the target's relative position moves opposite to the agent's displacement.
pub fn drift_2d<T: Real>(s: &[T], a: ContinuousAction, gains: [T; 2], dt: f64) -> [T; 5] {
    let v = gains[0].scale(a.v);
    let omega = gains[1].scale(a.w);
    let phi_raw = s[2] + omega.scale(dt);
    let phi = phi_raw.with_value(wrap_angle(phi_raw.val()));
    let x = s[0] - (v * phi.cos()).scale(dt);
    let y = s[1] - (v * phi.sin()).scale(dt);
    [x, y, phi, v, omega]
}

pub fn is_stop(action: &Action, cfg: &TaskConfig) -> bool {
    match action {
        Action::Discrete(a) => *a == DiscreteAction::Stop,
        Action::Continuous(a) => a.v.abs().max(a.w.abs()) < cfg.stop_threshold,
    }
}

fn distance_to_target(s: &WorldState) -> f64 {
    match s {
        WorldState::OneD(s) => s.x.abs(),
        WorldState::TwoD(s) => s.x.hypot(s.y),
    }
}

/// Reward for the terminal stop event, evaluated on the state where the agent stopped.
pub fn stop_reward(s: &WorldState, cfg: &TaskConfig) -> f64 {
    if distance_to_target(s) <= cfg.reward.radius {
        cfg.reward.hit_reward
    } else {
        0.0
    }
}

pub fn step_world_1d<R: Rng + ?Sized>(
    s: State1d,
    a: DiscreteAction,
    p: &ModelParams<f64>,
    cfg: &TaskConfig,
    t: usize,
    rng: &mut R,
) -> Result<Step<State1d>> {
    if !s.x.is_finite() {
        return Err(IrcError::NonFinite(format!("1D state x = {}", s.x)));
    }
    if a == DiscreteAction::Stop {
        return Ok(Step {
            state: s,
            reward: stop_reward(&WorldState::OneD(s), cfg),
            done: true,
        });
    }
    let noise: f64 = rng.sample(StandardNormal);
    let x = drift_1d(s.x, a, p.gains[0]) + p.sigma0 * noise;
    Ok(Step {
        state: State1d { x },
        reward: -cfg.reward.action_cost,
        done: t + 1 >= cfg.horizon,
    })
}

pub fn step_world_2d<R: Rng + ?Sized>(
    s: State2d,
    a: ContinuousAction,
    p: &ModelParams<f64>,
    cfg: &TaskConfig,
    t: usize,
    rng: &mut R,
) -> Result<Step<State2d>> {
    WorldState::TwoD(s).check_finite()?;
    if !(a.v.is_finite() && a.w.is_finite()) {
        return Err(IrcError::NonFinite(format!("2D action {a:?}")));
    }
    let a = ContinuousAction::new(a.v, a.w);
    if is_stop(&Action::Continuous(a), cfg) {
        return Ok(Step {
            state: s,
            reward: stop_reward(&WorldState::TwoD(s), cfg),
            done: true,
        });
    }
    let nx: f64 = rng.sample(StandardNormal);
    let ny: f64 = rng.sample(StandardNormal);
    let m = drift_2d(&s.to_array(), a, p.gains, cfg.dt);
    Ok(Step {
        state: State2d {
            x: m[0] + p.sigma0 * nx,
            y: m[1] + p.sigma0 * ny,
            phi: m[2],
            v: m[3],
            omega: m[4],
        },
        reward: -cfg.reward.action_cost,
        done: t + 1 >= cfg.horizon,
    })
}

/// Dispatch on the state/action variant.
pub fn step_world<R: Rng + ?Sized>(
    s: &WorldState,
    a: &Action,
    p: &ModelParams<f64>,
    cfg: &TaskConfig,
    t: usize,
    rng: &mut R,
) -> Result<Step<WorldState>> {
    match (s, a) {
        (WorldState::OneD(s), Action::Discrete(a)) => step_world_1d(*s, *a, p, cfg, t, rng).map(|st| Step {
            state: WorldState::OneD(st.state),
            reward: st.reward,
            done: st.done,
        }),
        (WorldState::TwoD(s), Action::Continuous(a)) => step_world_2d(*s, *a, p, cfg, t, rng).map(|st| Step {
            state: WorldState::TwoD(st.state),
            reward: st.reward,
            done: st.done,
        }),
        _ => Err(IrcError::WrongTask(format!("state {s:?} with action {a:?}"))),
    }
}

/// Noisy (v, omega) self-motion reading.
pub fn observe<R: Rng + ?Sized>(s: &WorldState, cfg: &TaskConfig, rng: &mut R) -> Result<Vec<f64>> {
    match s {
        WorldState::OneD(_) => Err(IrcError::WrongTask(
            "the 1D agent receives no observations".into(),
        )),
        WorldState::TwoD(s) => {
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            Ok(vec![
                s.v + cfg.obs_noise_std * n1,
                s.omega + cfg.obs_noise_std * n2,
            ])
        }
    }
}

/// Spawn a target and take the one-off noisy reading of its position.
///
/// The reading has the layout of the position part of the belief mean (`[x]` or `[x, y]`).
pub fn initial_state<R: Rng + ?Sized>(cfg: &TaskConfig, rng: &mut R) -> (WorldState, Vec<f64>) {
    let [dlo, dhi] = cfg.spawn.distance;
    let d = if dhi > dlo { rng.random_range(dlo..dhi) } else { dlo };
    match cfg.task {
        TaskId::Firefly1d => {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let x = sign * d;
            let n: f64 = rng.sample(StandardNormal);
            (WorldState::OneD(State1d { x }), vec![x + cfg.reading_std * n])
        }
        TaskId::Firefly2d => {
            let [blo, bhi] = cfg.spawn.bearing;
            let bearing = if bhi > blo { rng.random_range(blo..bhi) } else { blo };
            let (x, y) = (d * bearing.cos(), d * bearing.sin());
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            let s = State2d {
                x,
                y,
                phi: 0.0,
                v: 0.0,
                omega: 0.0,
            };
            (
                WorldState::TwoD(s),
                vec![x + cfg.reading_std * n1, y + cfg.reading_std * n2],
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn p1(g: f64, sigma: f64) -> ModelParams<f64> {
        ModelParams {
            gains: [g, 0.0],
            sigma0: sigma,
        }
    }

    #[test]
    fn right_moves_toward_positive_without_noise() {
        let cfg = TaskConfig::firefly_1d();
        let mut r = rng_from_seed(1);
        let st = step_world_1d(State1d { x: -3.0 }, DiscreteAction::Right, &p1(1.0, 0.0), &cfg, 0, &mut r).unwrap();
        assert_eq!(st.state.x, -2.0);
        assert!(!st.done);
        assert_eq!(st.reward, -cfg.reward.action_cost);
    }

    #[test]
    fn stop_pays_only_inside_radius() {
        let cfg = TaskConfig::firefly_1d();
        let mut r = rng_from_seed(1);
        let hit = step_world_1d(State1d { x: 0.1 }, DiscreteAction::Stop, &p1(1.0, 0.1), &cfg, 0, &mut r).unwrap();
        assert_eq!(hit.reward, cfg.reward.hit_reward);
        assert!(hit.done);
        let miss = step_world_1d(State1d { x: 5.0 }, DiscreteAction::Stop, &p1(1.0, 0.1), &cfg, 0, &mut r).unwrap();
        assert_eq!(miss.reward, 0.0);
        assert!(miss.done);
    }

    #[test]
    fn horizon_terminates() {
        let cfg = TaskConfig::firefly_1d();
        let mut r = rng_from_seed(1);
        let st = step_world_1d(State1d { x: 2.0 }, DiscreteAction::Left, &p1(1.0, 0.0), &cfg, cfg.horizon - 1, &mut r).unwrap();
        assert!(st.done);
    }

    #[test]
    fn non_finite_state_rejected() {
        let cfg = TaskConfig::firefly_1d();
        let mut r = rng_from_seed(1);
        assert!(step_world_1d(State1d { x: f64::NAN }, DiscreteAction::Left, &p1(1.0, 0.0), &cfg, 0, &mut r).is_err());
        let s = State2d { x: f64::INFINITY, y: 0.0, phi: 0.0, v: 0.0, omega: 0.0 };
        let cfg2 = TaskConfig::firefly_2d();
        assert!(step_world_2d(s, ContinuousAction::new(1.0, 0.0), &p1(1.0, 0.0), &cfg2, 0, &mut r).is_err());
    }

    #[test]
    fn unicycle_drives_onto_target() {
        let mut cfg = TaskConfig::firefly_2d();
        cfg.dt = 1.0;
        let p = ModelParams { gains: [1.0, 1.0], sigma0: 0.0 };
        let s = State2d { x: 1.0, y: 0.0, phi: 0.0, v: 0.0, omega: 0.0 };
        let mut r = rng_from_seed(2);
        let st = step_world_2d(s, ContinuousAction::new(1.0, 0.0), &p, &cfg, 0, &mut r).unwrap();
        assert!(st.state.x.abs() < 1e-15 && st.state.y.abs() < 1e-15);
        assert!(!st.done);
    }

    #[test]
    fn zero_control_is_a_stop_event() {
        let cfg = TaskConfig::firefly_2d();
        let p = ModelParams { gains: [1.0, 1.0], sigma0: 0.3 };
        let s = State2d { x: 0.2, y: 0.1, phi: 0.0, v: 0.0, omega: 0.0 };
        let mut r = rng_from_seed(3);
        let st = step_world_2d(s, ContinuousAction::new(0.0, 0.0), &p, &cfg, 0, &mut r).unwrap();
        assert!(st.done);
        assert_eq!(st.reward, cfg.reward.hit_reward);
    }

    #[test]
    fn heading_channel_is_noiseless() {
        let mut cfg = TaskConfig::firefly_2d();
        cfg.dt = 1.0;
        let p = ModelParams { gains: [1.0, 0.5], sigma0: 0.4 };
        let s = State2d { x: 3.0, y: 1.0, phi: 0.2, v: 0.0, omega: 0.0 };
        for seed in 0..20 {
            let mut r = rng_from_seed(seed);
            let st = step_world_2d(s, ContinuousAction::new(0.0, 1.0), &p, &cfg, 0, &mut r).unwrap();
            assert_eq!(st.state.phi, 0.2 + 0.5);
        }
    }

    #[test]
    fn observation_noise_free_and_mean() {
        let mut cfg = TaskConfig::firefly_2d();
        let s = WorldState::TwoD(State2d { x: 0.0, y: 0.0, phi: 0.0, v: 1.0, omega: 0.0 });
        cfg.obs_noise_std = 0.0;
        let mut r = rng_from_seed(4);
        assert_eq!(observe(&s, &cfg, &mut r).unwrap(), vec![1.0, 0.0]);
        cfg.obs_noise_std = 0.1;
        let n = 10_000;
        let (mut mv, mut mw) = (0.0, 0.0);
        for _ in 0..n {
            let o = observe(&s, &cfg, &mut r).unwrap();
            mv += o[0];
            mw += o[1];
        }
        assert!((mv / n as f64 - 1.0).abs() < 0.005);
        assert!((mw / n as f64).abs() < 0.005);
        let s1 = WorldState::OneD(State1d { x: 1.0 });
        assert!(matches!(observe(&s1, &cfg, &mut r), Err(IrcError::WrongTask(_))));
    }

    #[test]
    fn spawn_respects_bounds_and_is_uniform() {
        let mut cfg = TaskConfig::firefly_1d();
        cfg.spawn.distance = [0.0, 5.0];
        let mut r = rng_from_seed(5);
        let n = 10_000;
        let mut bins = [0usize; 10];
        for _ in 0..n {
            let (s, reading) = initial_state(&cfg, &mut r);
            let WorldState::OneD(s) = s else { unreachable!() };
            assert!(s.x.abs() <= 5.0);
            assert_eq!(reading[0], s.x);
            let b = (((s.x + 5.0) / 10.0) * 10.0).floor().clamp(0.0, 9.0) as usize;
            bins[b] += 1;
        }
        let expected = n as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-squared with 9 degrees of freedom.
        assert!(chi2 < 21.666, "chi2 = {chi2}, bins = {bins:?}");
    }

    #[test]
    fn wrap_angle_range() {
        for k in -20..20 {
            let a = wrap_angle(0.37 * k as f64);
            assert!(a > -PI && a <= PI);
        }
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn default_configs_validate() {
        TaskConfig::firefly_1d().validate().unwrap();
        TaskConfig::firefly_2d().validate().unwrap();
        let mut c = TaskConfig::firefly_2d();
        c.initial_var[0] = 0.0;
        assert!(c.validate().is_err());
    }
}

//! Parameterized toy control environments, rollout collection and the replay
//! buffer of real trajectories.
//!
//! Three state-based tasks stand in for heavyweight physics simulators while
//! keeping the same perturbation axes (mass, friction, gravity). Integration is
//! semi-implicit Euler with drag handled implicitly, so velocity decay stays
//! monotone for arbitrarily large friction.

use rand::Rng;
use std::f64::consts::PI;
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment parameters: {0}")]
    BadParams(String),
    #[error("unknown environment kind: {0}")]
    UnknownKind(String),
    #[error("step called on a finished episode")]
    EpisodeDone,
    #[error("action dimension mismatch: expected {expected}, got {got}")]
    ActionDim { expected: usize, got: usize },
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
    #[error("trajectory parse: {0}")]
    Parse(String),
}

/// Physical parameters of an environment instance.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EnvParams {
    pub mass: f64,
    pub friction: f64,
    pub gravity: f64,
    pub dt: f64,
    pub episode_horizon: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            friction: 0.1,
            gravity: 0.0,
            dt: 0.05,
            episode_horizon: 200,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.mass > 0.0) {
            return Err(EnvError::BadParams("mass must be positive".into()));
        }
        if self.friction < 0.0 {
            return Err(EnvError::BadParams("friction must be nonnegative".into()));
        }
        if !(self.dt > 0.0) {
            return Err(EnvError::BadParams("dt must be positive".into()));
        }
        if self.episode_horizon == 0 {
            return Err(EnvError::BadParams("episode_horizon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointMass1d,
    PointMass2d,
    Pendulum,
}

impl std::str::FromStr for EnvKind {
    type Err = EnvError;
    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "point_mass_1d" => Ok(EnvKind::PointMass1d),
            "point_mass_2d" => Ok(EnvKind::PointMass2d),
            "pendulum" => Ok(EnvKind::Pendulum),
            other => Err(EnvError::UnknownKind(other.to_string())),
        }
    }
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass1d => "point_mass_1d",
            EnvKind::PointMass2d => "point_mass_2d",
            EnvKind::Pendulum => "pendulum",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::PointMass1d => 2,
            EnvKind::PointMass2d => 4,
            EnvKind::Pendulum => 2,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            EnvKind::PointMass1d => 1,
            EnvKind::PointMass2d => 2,
            EnvKind::Pendulum => 1,
        }
    }
}

/// A single environment instance: a deterministic state machine once the
/// initial state is drawn.
///
/// Rewards:
/// - point mass: `-(|position - goal|^2) - 0.01 |a|^2` with goal at the origin;
/// - pendulum: `-(angle^2 + 0.1 w^2 + 0.001 a^2)` with angle zero upright.
#[derive(Debug, Clone)]
pub struct Environment {
    pub kind: EnvKind,
    pub params: EnvParams,
    state: Vec<f64>,
    t: usize,
    done: bool,
}

pub fn make_env(kind: EnvKind, params: EnvParams) -> Result<Environment, EnvError> {
    params.validate()?;
    Ok(Environment {
        kind,
        params,
        state: vec![0.0; kind.state_dim()],
        t: 0,
        done: false,
    })
}

impl Environment {
    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.kind.action_dim()
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn remaining_steps(&self) -> usize {
        self.params.episode_horizon.saturating_sub(self.t)
    }

    /// Draws a fresh initial state.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> &[f64] {
        self.state = match self.kind {
            EnvKind::PointMass1d => vec![rng.gen_range(-2.0..2.0), 0.0],
            EnvKind::PointMass2d => vec![
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                0.0,
                0.0,
            ],
            EnvKind::Pendulum => vec![rng.gen_range(-PI..PI), rng.gen_range(-1.0..1.0)],
        };
        self.t = 0;
        self.done = false;
        &self.state
    }

    /// Places the environment in an explicit state (used by tests and by the
    /// evaluation harness for reproducible sweeps).
    pub fn set_state(&mut self, state: &[f64]) {
        assert_eq!(state.len(), self.state_dim());
        self.state = state.to_vec();
        self.t = 0;
        self.done = false;
    }

    /// One transition. Actions are clipped to `[-1, 1]` per dimension.
    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool), EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        if action.len() != self.action_dim() {
            return Err(EnvError::ActionDim {
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        let a: Vec<f64> = action.iter().map(|&x| x.clamp(-1.0, 1.0)).collect();
        let p = &self.params;
        let reward;
        match self.kind {
            EnvKind::PointMass1d => {
                let (x, v) = (self.state[0], self.state[1]);
                let accel = a[0] / p.mass + p.gravity;
                let v_new = (v + p.dt * accel) / (1.0 + p.dt * p.friction / p.mass);
                let x_new = x + p.dt * v_new;
                reward = -(x - 0.0).powi(2) - 0.01 * a[0] * a[0];
                self.state = vec![x_new, v_new];
            }
            EnvKind::PointMass2d => {
                let (x, y, vx, vy) = (self.state[0], self.state[1], self.state[2], self.state[3]);
                let drag = 1.0 + p.dt * p.friction / p.mass;
                let vx_new = (vx + p.dt * (a[0] / p.mass)) / drag;
                let vy_new = (vy + p.dt * (a[1] / p.mass + p.gravity)) / drag;
                let x_new = x + p.dt * vx_new;
                let y_new = y + p.dt * vy_new;
                reward = -(x * x + y * y) - 0.01 * (a[0] * a[0] + a[1] * a[1]);
                self.state = vec![x_new, y_new, vx_new, vy_new];
            }
            EnvKind::Pendulum => {
                let (theta, omega) = (self.state[0], self.state[1]);
                // angle zero is upright; gravity torque vanishes at the hanging
                // equilibrium theta = pi
                let inertia = p.mass; // unit length arm
                let grav = if p.gravity == 0.0 { 9.81 } else { p.gravity.abs() };
                let torque = grav * theta.sin() + 2.0 * a[0] / inertia;
                let omega_new =
                    (omega + p.dt * torque) / (1.0 + p.dt * p.friction / inertia);
                let theta_new = wrap_angle(theta + p.dt * omega_new);
                let th = wrap_angle(theta);
                reward = -(th * th + 0.1 * omega * omega + 0.001 * a[0] * a[0]);
                self.state = vec![theta_new, omega_new];
            }
        }
        self.t += 1;
        if self.t >= p.episode_horizon {
            self.done = true;
        }
        Ok((self.state.clone(), reward, self.done))
    }
}

fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI) % (2.0 * PI);
    if t < 0.0 {
        t += 2.0 * PI;
    }
    t - PI
}

/// Dimensions of the flattened trajectory tensor: `(len + 1)` states of size
/// `d_s` followed by `len` actions of size `d_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajLayout {
    pub d_s: usize,
    pub d_a: usize,
    pub len: usize,
}

impl TrajLayout {
    pub fn tensor_dim(&self) -> usize {
        (self.len + 1) * self.d_s + self.len * self.d_a
    }

    /// Length of the state block at the front of the tensor.
    pub fn state_block(&self) -> usize {
        (self.len + 1) * self.d_s
    }

    pub fn state_slot(&self, t: usize) -> std::ops::Range<usize> {
        assert!(t <= self.len);
        t * self.d_s..(t + 1) * self.d_s
    }

    pub fn action_slot(&self, t: usize) -> std::ops::Range<usize> {
        assert!(t < self.len);
        let off = self.state_block();
        off + t * self.d_a..off + (t + 1) * self.d_a
    }
}

/// A fixed-length window of states, actions and rewards: the object that is
/// diffused, guided and scored.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(L + 1) x d_s`
    pub states: Vec<Vec<f64>>,
    /// `L x d_a`
    pub actions: Vec<Vec<f64>>,
    /// length `L`
    pub rewards: Vec<f64>,
    pub gamma: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn action_dim(&self) -> usize {
        if self.actions.is_empty() {
            0
        } else {
            self.actions[0].len()
        }
    }

    /// Flattened tensor: all states row-major, then all actions. Guidance
    /// relies on this ordering to slice the state block.
    pub fn to_tensor(&self) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.tensor_dim());
        for s in &self.states {
            t.extend_from_slice(s);
        }
        for a in &self.actions {
            t.extend_from_slice(a);
        }
        t
    }

    pub fn tensor_dim(&self) -> usize {
        self.states.len() * self.state_dim() + self.actions.len() * self.action_dim()
    }

    /// Rebuilds a trajectory from a flat tensor. Rewards start out zeroed and
    /// are labeled later (synthetic trajectories use the learned reward model).
    pub fn from_tensor(tensor: &[f64], d_s: usize, d_a: usize, len: usize, gamma: f64) -> Self {
        assert_eq!(tensor.len(), (len + 1) * d_s + len * d_a);
        let states = (0..=len)
            .map(|t| tensor[t * d_s..(t + 1) * d_s].to_vec())
            .collect();
        let off = (len + 1) * d_s;
        let actions = (0..len)
            .map(|t| tensor[off + t * d_a..off + (t + 1) * d_a].to_vec())
            .collect();
        Trajectory {
            states,
            actions,
            rewards: vec![0.0; len],
            gamma,
        }
    }

    /// Splits a long trajectory into consecutive non-overlapping windows of
    /// `len` steps (the trailing remainder is dropped).
    pub fn windows(&self, len: usize) -> Vec<Trajectory> {
        let mut out = Vec::new();
        let mut t = 0;
        while t + len <= self.len() {
            out.push(Trajectory {
                states: self.states[t..=t + len].to_vec(),
                actions: self.actions[t..t + len].to_vec(),
                rewards: self.rewards[t..t + len].to_vec(),
                gamma: self.gamma,
            });
            t += len;
        }
        out
    }

    /// Writes one row per timestep: `t, s..., a..., r`. The final state is
    /// emitted with empty action/reward columns.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), EnvError> {
        for t in 0..self.len() {
            let s = join(&self.states[t]);
            let a = join(&self.actions[t]);
            writeln!(w, "{t},{s},{a},{}", fmt_f64(self.rewards[t]))?;
        }
        writeln!(w, "{},{},,", self.len(), join(&self.states[self.len()]))?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R, d_s: usize, d_a: usize, gamma: f64) -> Result<Self, EnvError> {
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() < 1 + d_s {
                return Err(EnvError::Parse(format!("short row: {line}")));
            }
            let parse = |s: &str| -> Result<f64, EnvError> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| EnvError::Parse(format!("{s}: {e}")))
            };
            let s: Vec<f64> = cells[1..1 + d_s]
                .iter()
                .map(|c| parse(c))
                .collect::<Result<_, _>>()?;
            states.push(s);
            let rest = &cells[1 + d_s..];
            if rest.len() >= d_a + 1 && !rest[0].trim().is_empty() {
                let a: Vec<f64> = rest[..d_a].iter().map(|c| parse(c)).collect::<Result<_, _>>()?;
                actions.push(a);
                rewards.push(parse(rest[d_a])?);
            }
        }
        if states.len() != actions.len() + 1 {
            return Err(EnvError::Parse(format!(
                "expected {} states for {} actions, got {}",
                actions.len() + 1,
                actions.len(),
                states.len()
            )));
        }
        Ok(Trajectory {
            states,
            actions,
            rewards,
            gamma,
        })
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",")
}

fn fmt_f64(x: f64) -> String {
    // shortest round-trip representation keeps the CSVs byte-stable
    format!("{x}")
}

/// Discounted return over the window: `sum_t gamma^t r_t`.
pub fn discounted_return(traj: &Trajectory) -> f64 {
    let mut acc = 0.0;
    let mut g = 1.0;
    for &r in &traj.rewards {
        acc += g * r;
        g *= traj.gamma;
    }
    acc
}

/// Runs `len` policy steps from the environment's current state.
pub fn collect_rollout<R, F>(
    env: &mut Environment,
    mut policy: F,
    len: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Trajectory, EnvError>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], &mut R) -> Vec<f64>,
{
    assert!(len <= env.remaining_steps(), "window exceeds remaining horizon");
    let mut states = Vec::with_capacity(len + 1);
    let mut actions = Vec::with_capacity(len);
    let mut rewards = Vec::with_capacity(len);
    states.push(env.state().to_vec());
    for _ in 0..len {
        let a = policy(env.state(), rng);
        let (s, r, _) = env.step(&a)?;
        states.push(s);
        actions.push(a);
        rewards.push(r);
    }
    Ok(Trajectory {
        states,
        actions,
        rewards,
        gamma,
    })
}

/// Ring buffer of real trajectories with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Trajectory>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0);
        Self {
            items: Vec::new(),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, traj: Trajectory) {
        if self.items.len() < self.capacity {
            self.items.push(traj);
        } else {
            self.items[self.next] = traj;
            self.next = (self.next + 1) % self.capacity;
        }
    }

    pub fn sample<'a, R: Rng + ?Sized>(&'a self, rng: &mut R) -> &'a Trajectory {
        assert!(!self.items.is_empty(), "sampling from an empty buffer");
        &self.items[rng.gen_range(0..self.items.len())]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Trajectory> {
        self.items.iter()
    }
}

//! Boat-in-a-river environment.
//!
//! The boat moves in the box `[-3, 2] x [-2, 2]` under a current along the
//! first axis whose speed `2 - 0.5 * x2^2` falls off away from the centre line.
//! The reward is the negative scaled distance to the goal, and the safety
//! margin is the signed distance to the nearest circular obstacle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the unit-disc action constraint.
pub const ACTION_NORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State {
    pub x1: f64,
    pub x2: f64,
}

impl State {
    pub const fn new(x1: f64, x2: f64) -> Self {
        Self { x1, x2 }
    }

    pub fn distance(&self, other: &State) -> f64 {
        (self.x1 - other.x1).hypot(self.x2 - other.x2)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.x1, self.x2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub a1: f64,
    pub a2: f64,
}

impl Action {
    pub const fn new(a1: f64, a2: f64) -> Self {
        Self { a1, a2 }
    }

    pub fn norm(&self) -> f64 {
        self.a1.hypot(self.a2)
    }

    /// Scales the action back onto the unit disc when it lies outside.
    pub fn project_to_disc(self) -> Self {
        let n = self.norm();
        if n > 1.0 {
            Self::new(self.a1 / n, self.a2 / n)
        } else {
            self
        }
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.a1, self.a2]
    }
}

/// A boat state paired with the remaining performance budget `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub state: State,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub gamma: f64,
    pub goal: [f64; 2],
    pub reward_scale: f64,
    pub obstacles: Vec<[f64; 2]>,
    pub obstacle_radius: f64,
    pub episode_length: usize,
    pub x1_bounds: [f64; 2],
    pub x2_bounds: [f64; 2],
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.005,
            gamma: 0.99,
            goal: [0.5, 0.0],
            reward_scale: 0.1,
            obstacles: vec![[-0.5, 0.5], [-1.0, -1.2]],
            obstacle_radius: 0.4,
            episode_length: 400,
            x1_bounds: [-3.0, 2.0],
            x2_bounds: [-2.0, 2.0],
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.obstacle_radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "obstacle_radius must be positive, got {}",
                self.obstacle_radius
            )));
        }
        if self.obstacles.is_empty() {
            return Err(Error::InvalidConfig("at least one obstacle is required".into()));
        }
        if self.episode_length == 0 {
            return Err(Error::InvalidConfig("episode_length must be at least 1".into()));
        }
        if !(self.x1_bounds[0] < self.x1_bounds[1] && self.x2_bounds[0] < self.x2_bounds[1]) {
            return Err(Error::InvalidConfig("state bounds must be non-empty intervals".into()));
        }
        Ok(())
    }

    pub fn goal_state(&self) -> State {
        State::new(self.goal[0], self.goal[1])
    }

    pub fn clamp(&self, s: State) -> State {
        State::new(
            s.x1.clamp(self.x1_bounds[0], self.x1_bounds[1]),
            s.x2.clamp(self.x2_bounds[0], self.x2_bounds[1]),
        )
    }
}

/// `-C * ||s - goal||`.
pub fn reward(s: &State, cfg: &EnvConfig) -> f64 {
    -cfg.reward_scale * s.distance(&cfg.goal_state())
}

/// Signed distance to the nearest obstacle boundary; negative inside an obstacle.
pub fn safety(s: &State, cfg: &EnvConfig) -> f64 {
    cfg.obstacles
        .iter()
        .map(|c| s.distance(&State::new(c[0], c[1])) - cfg.obstacle_radius)
        .fold(f64::INFINITY, f64::min)
}

/// Raw dynamics map with no action check and no clamping.
pub fn step_unchecked(s: &State, a: &Action, dt: f64) -> State {
    let drift = 2.0 - 0.5 * s.x2 * s.x2;
    State::new(s.x1 + (a.a1 + drift) * dt, s.x2 + a.a2 * dt)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: State,
    /// Reward of the pre-step state.
    pub reward: f64,
    /// Safety margin of the pre-step state.
    pub ell: f64,
    pub done: bool,
}

/// Advances the boat by one step. `t` is the number of steps already taken in
/// the episode; `done` is raised on the step that completes the episode.
pub fn step(s: &State, a: &Action, t: usize, cfg: &EnvConfig) -> Result<StepOutcome> {
    let norm = a.norm();
    if !(norm <= 1.0 + ACTION_NORM_TOL) {
        return Err(Error::ActionOutOfBounds { norm });
    }
    let next = cfg.clamp(step_unchecked(s, a, cfg.dt));
    Ok(StepOutcome {
        next,
        reward: reward(s, cfg),
        ell: safety(s, cfg),
        done: t + 1 >= cfg.episode_length,
    })
}

/// Budget update `z' = (z - r) / gamma`.
pub fn next_budget(z: f64, r: f64, gamma: f64) -> f64 {
    (z - r) / gamma
}

/// Inverse of [`next_budget`].
pub fn previous_budget(z_next: f64, r: f64, gamma: f64) -> f64 {
    gamma * z_next + r
}

pub fn step_augmented(aug: &AugmentedState, a: &Action, cfg: &EnvConfig) -> Result<AugmentedState> {
    if !aug.z.is_finite() {
        return Err(Error::NonFinite(format!("budget z = {}", aug.z)));
    }
    let out = step(&aug.state, a, 0, cfg)?;
    Ok(AugmentedState {
        state: out.next,
        z: next_budget(aug.z, out.reward, cfg.gamma),
    })
}

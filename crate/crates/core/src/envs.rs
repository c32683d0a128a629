//! Point-robot navigation tasks: unicycle kinematics with unit timestep,
//! the circle-following and goal-reaching rewards, and the ground-truth
//! constraint geometry used for demonstrations and metrics.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Both action components are limited to `[-ACTION_LIMIT, ACTION_LIMIT]`.
pub const ACTION_LIMIT: f64 = 0.25;

/// Guard against the origin singularity of the circle reward.
const NORM_FLOOR: f64 = 1e-6;

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl PointState {
    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        PointState {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointAction {
    pub speed: f64,
    pub omega: f64,
}

impl PointAction {
    /// Clamps both components into the legal range.
    pub fn new(speed: f64, omega: f64) -> Self {
        PointAction {
            speed: speed.clamp(-ACTION_LIMIT, ACTION_LIMIT),
            omega: omega.clamp(-ACTION_LIMIT, ACTION_LIMIT),
        }
    }

    pub fn is_legal(&self) -> bool {
        self.speed.abs() <= ACTION_LIMIT && self.omega.abs() <= ACTION_LIMIT
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Circle,
    Obstacle,
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvKind::Circle => "circle",
            EnvKind::Obstacle => "obstacle",
        })
    }
}

/// Axis-aligned box `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub const fn square(half: f64) -> Self {
        Bounds {
            x_min: -half,
            x_max: half,
            y_min: -half,
            y_max: half,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        [
            rng.random_range(self.x_min..=self.x_max),
            rng.random_range(self.y_min..=self.y_max),
        ]
    }
}

/// Geometry, reward constants and episode length of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub episode_length: usize,
    /// Radius of the circle the circle reward encourages.
    pub circle_radius: f64,
    /// Circle task walls at `x = ±circle_wall`.
    pub circle_wall: f64,
    /// Obstacle rectangle.
    pub obstacle: Bounds,
    /// Everything with `x <= known_wall_x` is blocked in the obstacle task.
    pub known_wall_x: f64,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub goal_bonus: f64,
    pub norm_factor: f64,
    /// State-space box used for regularizer sampling, metrics and grid export.
    pub bounds: Bounds,
}

impl EnvSpec {
    fn base(kind: EnvKind, episode_length: usize) -> Self {
        EnvSpec {
            kind,
            episode_length,
            circle_radius: 10.0,
            circle_wall: 6.0,
            obstacle: Bounds {
                x_min: -2.0,
                x_max: 5.0,
                y_min: -2.0,
                y_max: 2.0,
            },
            known_wall_x: -2.0,
            goal: [0.0, 10.0],
            goal_radius: 0.3,
            goal_bonus: 0.1,
            norm_factor: 20.0,
            bounds: Bounds::square(12.0),
        }
    }

    pub fn point_circle() -> Self {
        Self::base(EnvKind::Circle, 150)
    }

    pub fn point_obstacle() -> Self {
        Self::base(EnvKind::Obstacle, 175)
    }

    pub fn for_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Circle => Self::point_circle(),
            EnvKind::Obstacle => Self::point_obstacle(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("env.episode_length", self.episode_length as f64),
            ("env.circle_radius", self.circle_radius),
            ("env.circle_wall", self.circle_wall),
            ("env.goal_radius", self.goal_radius),
            ("env.norm_factor", self.norm_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, "must be positive and finite"));
            }
        }
        if !self.bounds.is_valid() {
            return Err(Error::config("env.bounds", "empty box"));
        }
        if !self.obstacle.is_valid() {
            return Err(Error::config("env.obstacle", "empty rectangle"));
        }
        let b = &self.bounds;
        let inside = match self.kind {
            EnvKind::Circle => b.x_min < -self.circle_wall && b.x_max > self.circle_wall,
            EnvKind::Obstacle => {
                b.contains(self.obstacle.x_min, self.obstacle.y_min)
                    && b.contains(self.obstacle.x_max, self.obstacle.y_max)
                    && b.contains(self.goal[0], self.goal[1])
                    && b.x_min < self.known_wall_x
            }
        };
        if !inside {
            return Err(Error::config("env.bounds", "box must contain all task geometry"));
        }
        Ok(())
    }

    /// Ground-truth infeasibility of a state.
    pub fn true_infeasible(&self, s: &PointState) -> bool {
        self.true_infeasible_xy(s.x, s.y)
    }

    pub fn true_infeasible_xy(&self, x: f64, y: f64) -> bool {
        match self.kind {
            EnvKind::Circle => x.abs() > self.circle_wall,
            EnvKind::Obstacle => {
                let o = &self.obstacle;
                o.contains(x, y) || x <= self.known_wall_x
            }
        }
    }

    /// The part of the true constraint the agent is told about up front.
    pub fn known_infeasible_xy(&self, x: f64, _y: f64) -> bool {
        match self.kind {
            EnvKind::Circle => false,
            EnvKind::Obstacle => x <= self.known_wall_x,
        }
    }

    pub fn reward(&self, s: &PointState, a: &PointAction) -> f64 {
        match self.kind {
            EnvKind::Circle => reward_circle(s, a, self.circle_radius),
            EnvKind::Obstacle => reward_obstacle(s, self),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> PointState {
        let (x, y) = match self.kind {
            EnvKind::Circle => (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)),
            EnvKind::Obstacle => (rng.random_range(-0.5..=0.5), rng.random_range(-8.5..=-7.5)),
        };
        let psi = rng.random_range(-PI..=PI);
        PointState::new(x, y, psi)
    }

    fn goal_distance(&self, s: &PointState) -> f64 {
        ((s.x - self.goal[0]).powi(2) + (s.y - self.goal[1]).powi(2)).sqrt()
    }
}

/// Feasibility of a state: `Infeasible` corresponds to indicator value 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feasibility {
    Feasible,
    Infeasible,
}

impl Feasibility {
    /// Constraint indicator: 0 feasible, 1 infeasible.
    pub fn indicator(self) -> u8 {
        match self {
            Feasibility::Feasible => 0,
            Feasibility::Infeasible => 1,
        }
    }

    pub fn is_infeasible(self) -> bool {
        self == Feasibility::Infeasible
    }
}

pub fn true_constraint(spec: &EnvSpec, s: &PointState) -> Feasibility {
    if spec.true_infeasible(s) {
        Feasibility::Infeasible
    } else {
        Feasibility::Feasible
    }
}

/// Reward for circling clockwise at `radius`:
/// `(y·dx − x·dy) / (1 + |‖p‖ − radius|) / ‖p‖`.
pub fn reward_circle(s: &PointState, a: &PointAction, radius: f64) -> f64 {
    let dx = a.speed * s.psi.cos();
    let dy = a.speed * s.psi.sin();
    let norm = s.x.hypot(s.y).max(NORM_FLOOR);
    (s.y * dx - s.x * dy) / (1.0 + (norm - radius).abs()) / norm
}

/// Negative normalized distance to the goal, plus a bonus inside the goal radius.
pub fn reward_obstacle(s: &PointState, spec: &EnvSpec) -> f64 {
    let dist = spec.goal_distance(s);
    let mut r = -dist / spec.norm_factor;
    if dist < spec.goal_radius {
        r += spec.goal_bonus;
    }
    r
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: PointState,
    pub reward: f64,
    /// Episode is over (goal reached or time limit).
    pub done: bool,
    /// Episode ended by reaching the goal rather than by the time limit.
    pub terminal: bool,
    /// Ground truth, only for metrics and demo validation.
    pub true_violation: bool,
}

/// Unit-timestep unicycle update.
pub fn transition(s: &PointState, a: &PointAction) -> PointState {
    PointState::new(
        s.x + a.speed * s.psi.cos(),
        s.y + a.speed * s.psi.sin(),
        s.psi + a.omega,
    )
}

/// Advances one step; `t` is the zero-based index of the step being taken.
pub fn env_step(spec: &EnvSpec, s: &PointState, a: &PointAction, t: usize) -> StepOutcome {
    let a = PointAction::new(a.speed, a.omega);
    let next = transition(s, &a);
    let reward = spec.reward(&next, &a);
    let terminal = spec.kind == EnvKind::Obstacle && spec.goal_distance(&next) < spec.goal_radius;
    StepOutcome {
        next_state: next,
        reward,
        done: terminal || t + 1 >= spec.episode_length,
        terminal,
        true_violation: spec.true_infeasible(&next),
    }
}

/// Episode bookkeeping around [`env_step`].
#[derive(Clone, Debug)]
pub struct Env {
    pub spec: EnvSpec,
    state: PointState,
    t: usize,
}

impl Env {
    pub fn new<R: Rng + ?Sized>(spec: EnvSpec, rng: &mut R) -> Self {
        let state = spec.reset(rng);
        Env { spec, state, t: 0 }
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> PointState {
        self.state = self.spec.reset(rng);
        self.t = 0;
        self.state
    }

    pub fn state(&self) -> PointState {
        self.state
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, a: &PointAction) -> StepOutcome {
        let out = env_step(&self.spec, &self.state, a, self.t);
        self.state = out.next_state;
        self.t += 1;
        out
    }
}

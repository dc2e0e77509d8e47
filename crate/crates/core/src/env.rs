//! Square world with a start corner, a goal corner and one obstacle that
//! wanders toward the agent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

pub(crate) fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

pub(crate) fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

pub(crate) fn unit(v: Vec2) -> Vec2 {
    let n = norm(v);
    if n > 0.0 {
        [v[0] / n, v[1] / n]
    } else {
        [0.0, 0.0]
    }
}

/// Scales `v` down to `max` if longer. Idempotent: a vector that was already
/// clamped is returned unchanged, bit for bit.
pub fn clamp_norm(v: Vec2, max: f64) -> Vec2 {
    let n = norm(v);
    if n > max * (1.0 + 1e-12) {
        [v[0] * max / n, v[1] * max / n]
    } else {
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub world_size: f64,
    pub start: Vec2,
    pub goal: Vec2,
    /// World units per step.
    pub agent_max_speed: f64,
    pub agent_radius: f64,
    pub obstacle_radius: f64,
    pub obstacle_speed: f64,
    /// Weight of the pull toward the agent in the obstacle's walk, in `[0, 1]`.
    pub obstacle_bias: f64,
    pub goal_radius: f64,
    pub max_steps: usize,
    /// Obstacle spawn: fraction of the start→goal diagonal, drawn uniformly
    /// in this interval.
    pub spawn_along: [f64; 2],
    /// Obstacle spawn: maximum perpendicular offset from the diagonal.
    pub spawn_offset: f64,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            world_size: 128.0,
            start: [0.0, 0.0],
            goal: [128.0, 128.0],
            agent_max_speed: 3.5,
            agent_radius: 4.0,
            obstacle_radius: 4.0,
            obstacle_speed: 2.5,
            obstacle_bias: 0.5,
            goal_radius: 5.0,
            max_steps: 200,
            spawn_along: [0.4, 0.7],
            spawn_offset: 20.0,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world_size", self.world_size),
            ("agent_max_speed", self.agent_max_speed),
            ("agent_radius", self.agent_radius),
            ("obstacle_radius", self.obstacle_radius),
            ("obstacle_speed", self.obstacle_speed),
            ("goal_radius", self.goal_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("env.{name} must be positive, got {v}")));
            }
        }
        if self.max_steps == 0 {
            return Err(Error::Config("env.max_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.obstacle_bias) {
            return Err(Error::Config("env.obstacle_bias must lie in [0, 1]".into()));
        }
        let [lo, hi] = self.spawn_along;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) || self.spawn_offset < 0.0 {
            return Err(Error::Config("env.spawn_along must be an interval inside [0, 1]".into()));
        }
        let inside = |p: Vec2| p.iter().all(|c| (0.0..=self.world_size).contains(c));
        if !inside(self.start) || !inside(self.goal) {
            return Err(Error::Config("env.start and env.goal must lie inside the world".into()));
        }
        Ok(())
    }

    pub fn collision_distance(&self) -> f64 {
        self.agent_radius + self.obstacle_radius
    }

    fn clip(&self, p: Vec2) -> Vec2 {
        [p[0].clamp(0.0, self.world_size), p[1].clamp(0.0, self.world_size)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    ReachedGoal,
    /// Step limit hit without reaching the goal.
    Done,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agent: Vec2,
    pub obstacle: Vec2,
    pub t: usize,
    pub status: Status,
    pub collided_ever: bool,
    rng: ChaCha8Rng,
}

impl EnvState {
    pub fn is_running(&self) -> bool {
        self.status == Status::Running
    }

    pub fn colliding(&self, cfg: &EnvConfig) -> bool {
        dist(self.agent, self.obstacle) < cfg.collision_distance()
    }

    /// `(agent_x, agent_y, obstacle_x, obstacle_y)` in world units.
    pub fn observation(&self) -> [f64; 4] {
        [self.agent[0], self.agent[1], self.obstacle[0], self.obstacle[1]]
    }
}

/// Start a new episode; the obstacle spawn and all later obstacle noise come
/// from `cfg.seed`.
pub fn reset(cfg: &EnvConfig) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [lo, hi] = cfg.spawn_along;
    let along = if hi > lo { rng.random_range(lo..hi) } else { lo };
    let offset = if cfg.spawn_offset > 0.0 {
        rng.random_range(-cfg.spawn_offset..cfg.spawn_offset)
    } else {
        0.0
    };
    let dir = unit(sub(cfg.goal, cfg.start));
    let perp = [-dir[1], dir[0]];
    let span = dist(cfg.goal, cfg.start);
    let centre = [cfg.start[0] + dir[0] * along * span, cfg.start[1] + dir[1] * along * span];
    let obstacle = cfg.clip([centre[0] + perp[0] * offset, centre[1] + perp[1] * offset]);
    let mut state = EnvState {
        agent: cfg.start,
        obstacle,
        t: 0,
        status: Status::Running,
        collided_ever: false,
        rng,
    };
    state.collided_ever = state.colliding(cfg);
    state
}

/// Advance one step with agent velocity `u` (world units per step).
pub fn step(state: &EnvState, u: Vec2, cfg: &EnvConfig) -> Result<EnvState> {
    if !state.is_running() {
        return Err(Error::NotRunning);
    }
    let mut next = state.clone();
    let v = clamp_norm(u, cfg.agent_max_speed);
    next.agent = cfg.clip([state.agent[0] + v[0], state.agent[1] + v[1]]);

    let angle = next.rng.random_range(0.0..std::f64::consts::TAU);
    let noise = [angle.cos(), angle.sin()];
    let pull = unit(sub(next.agent, state.obstacle));
    let lambda = cfg.obstacle_bias;
    let drift = [
        cfg.obstacle_speed * (lambda * pull[0] + (1.0 - lambda) * noise[0]),
        cfg.obstacle_speed * (lambda * pull[1] + (1.0 - lambda) * noise[1]),
    ];
    let drift = clamp_norm(drift, cfg.obstacle_speed);
    next.obstacle = cfg.clip([state.obstacle[0] + drift[0], state.obstacle[1] + drift[1]]);

    next.t += 1;
    if next.colliding(cfg) {
        next.collided_ever = true;
    }
    if dist(next.agent, cfg.goal) < cfg.goal_radius {
        next.status = Status::ReachedGoal;
    } else if next.t >= cfg.max_steps {
        next.status = Status::Done;
    }
    Ok(next)
}

/// Straight-line velocity toward the goal at full speed.
pub fn nominal_input(state: &EnvState, cfg: &EnvConfig) -> Vec2 {
    let to_goal = sub(cfg.goal, state.agent);
    if norm(to_goal) < cfg.goal_radius {
        return [0.0, 0.0];
    }
    let d = unit(to_goal);
    [d[0] * cfg.agent_max_speed, d[1] * cfg.agent_max_speed]
}

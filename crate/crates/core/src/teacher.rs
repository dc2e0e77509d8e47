//! Scripted stand-in for a human who takes over the agent when the obstacle
//! gets close and hands control back once it is clear.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetHeader, Episode, EpisodeMeta, Outcome, Source, StepVector};
use crate::env::{self, dist, norm, sub, unit, EnvConfig, EnvState, Status, Vec2};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Take over when the agent will pass closer than this to the obstacle
    /// within `lookahead` steps at its current velocity.
    pub danger_radius: f64,
    /// Hand back once the nominal path keeps at least this distance from the
    /// obstacle over the lookahead.
    pub safe_radius: f64,
    /// Weight of the sideways component while evading, in `[0, 1]`.
    pub evasion_blend: f64,
    /// Tilt of the sideways direction away from the obstacle, in radians.
    /// The obstacle closes in on the agent, so a pure tangent is not enough
    /// to open the gap.
    pub evasion_angle: f64,
    /// Each take-over and hand-back distance is drawn uniformly within this
    /// margin of its radius, so reaction points vary like a person's would.
    pub reaction_jitter: f64,
    /// Stationary std (radians) of a slowly drifting heading offset applied
    /// to the nominal input while not intervening. Without it every
    /// unassisted step uses exactly the nominal input.
    pub wander_std: f64,
    /// Per-step autocorrelation of the heading offset, in `[0, 1)`.
    pub wander_corr: f64,
    /// Largest fractional slow-down of unassisted steps; the pace drifts
    /// with the same autocorrelation as the heading.
    pub wander_slow: f64,
    /// Steps the teacher extrapolates the agent's current velocity; 0 judges
    /// by the present distance alone.
    pub lookahead: usize,
    /// Fewest consecutive assisted steps per take-over, at least 1.
    pub min_hold: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            danger_radius: 20.0,
            safe_radius: 28.0,
            evasion_blend: 0.7,
            evasion_angle: 0.6,
            reaction_jitter: 4.0,
            wander_std: 0.4,
            wander_corr: 0.9,
            wander_slow: 0.4,
            lookahead: 6,
            min_hold: 3,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.danger_radius && self.danger_radius < self.safe_radius) {
            return Err(Error::Config(
                "teacher requires 0 < danger_radius < safe_radius".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.evasion_blend) {
            return Err(Error::Config("teacher.evasion_blend must lie in [0, 1]".into()));
        }
        let j = self.reaction_jitter;
        if !(j >= 0.0 && j < self.danger_radius && self.danger_radius + j <= self.safe_radius - j) {
            return Err(Error::Config(
                "teacher.reaction_jitter must keep every take-over distance below every hand-back distance".into(),
            ));
        }
        if !(self.wander_std >= 0.0
            && self.wander_std.is_finite()
            && (0.0..1.0).contains(&self.wander_corr)
            && (0.0..1.0).contains(&self.wander_slow))
        {
            return Err(Error::Config(
                "teacher requires wander_std >= 0, wander_corr in [0, 1) and wander_slow in [0, 1)".into(),
            ));
        }
        if self.min_hold == 0 {
            return Err(Error::Config("teacher.min_hold must be at least 1".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.evasion_angle) {
            return Err(Error::Config("teacher.evasion_angle must lie in [0, pi/2)".into()));
        }
        Ok(())
    }
}

/// Intervention state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherState {
    pub active: bool,
    /// +1 or −1: which perpendicular of agent→obstacle the evasion follows.
    side: f64,
    /// Distance below which the next take-over happens.
    take_over: f64,
    /// Distance above which the current take-over ends.
    hand_back: f64,
    /// Current heading offset of unassisted steps, in radians.
    heading: f64,
    /// Standardized pace drift; speed scales by `1 − wander_slow·min(|pace|, 1)`.
    pace: f64,
    /// Assisted steps since the current take-over.
    held: usize,
    /// Velocity applied on the previous step.
    last_u: Vec2,
    rng: ChaCha8Rng,
}

impl TeacherState {
    pub fn new(cfg: &TeacherConfig, seed: u64) -> Self {
        let mut state = Self {
            active: false,
            side: 1.0,
            take_over: cfg.danger_radius,
            hand_back: cfg.safe_radius,
            heading: 0.0,
            pace: 0.0,
            held: 0,
            last_u: [0.0, 0.0],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        state.take_over = state.draw(cfg.danger_radius, cfg.reaction_jitter);
        if cfg.wander_std > 0.0 {
            let z: f64 = state.rng.sample(StandardNormal);
            state.heading = cfg.wander_std * z;
        }
        if cfg.wander_slow > 0.0 {
            state.pace = state.rng.sample(StandardNormal);
        }
        state
    }

    fn drift(&mut self, cfg: &TeacherConfig) {
        if cfg.wander_std > 0.0 {
            let z: f64 = self.rng.sample(StandardNormal);
            let rho = cfg.wander_corr;
            self.heading = rho * self.heading + cfg.wander_std * (1.0 - rho * rho).sqrt() * z;
        }
        if cfg.wander_slow > 0.0 {
            let z: f64 = self.rng.sample(StandardNormal);
            let rho = cfg.wander_corr;
            self.pace = rho * self.pace + (1.0 - rho * rho).sqrt() * z;
        }
    }

    fn draw(&mut self, centre: f64, jitter: f64) -> f64 {
        if jitter > 0.0 {
            self.rng.random_range(centre - jitter..=centre + jitter)
        } else {
            centre
        }
    }
}

/// Distance from `p` along `dir` until the ray leaves the world square.
fn wall_clearance(p: Vec2, dir: Vec2, world: f64) -> f64 {
    let mut t = f64::INFINITY;
    for k in 0..2 {
        if dir[k] > 1e-12 {
            t = t.min((world - p[k]) / dir[k]);
        } else if dir[k] < -1e-12 {
            t = t.min(-p[k] / dir[k]);
        }
    }
    t
}

fn tangent(radial: Vec2, side: f64) -> Vec2 {
    [-radial[1] * side, radial[0] * side]
}

/// Sideways direction on `side`, tilted `angle` away from the obstacle.
fn evasion_dir(away: Vec2, side: f64, angle: f64) -> Vec2 {
    let t = tangent(away, side);
    let (sin, cos) = angle.sin_cos();
    unit([t[0] * cos + away[0] * sin, t[1] * cos + away[1] * sin])
}

/// Picks the side with more room before the wall; ties go to the side that
/// bends toward the goal.
fn choose_side(state: &EnvState, env_cfg: &EnvConfig, cfg: &TeacherConfig) -> f64 {
    let away = unit(sub(state.agent, state.obstacle));
    let goal_dir = unit(sub(env_cfg.goal, state.agent));
    let score = |side: f64| {
        let e = evasion_dir(away, side, cfg.evasion_angle);
        (wall_clearance(state.agent, e, env_cfg.world_size), e[0] * goal_dir[0] + e[1] * goal_dir[1])
    };
    let (left_room, left_dot) = score(1.0);
    let (right_room, right_dot) = score(-1.0);
    if left_room > right_room || (left_room == right_room && left_dot >= right_dot) {
        1.0
    } else {
        -1.0
    }
}

/// Returns the velocity to apply and the assistance label for this step.
pub fn teach_input(
    state: &EnvState,
    nominal_u: Vec2,
    cfg: &TeacherConfig,
    env_cfg: &EnvConfig,
    mode: &mut TeacherState,
) -> (Vec2, f64) {
    if state.t == 0 {
        mode.last_u = nominal_u;
    }
    let threat = closest_approach(state.agent, mode.last_u, state.obstacle, cfg.lookahead);
    if !mode.active && threat < mode.take_over {
        mode.active = true;
        mode.side = choose_side(state, env_cfg, cfg);
        mode.hand_back = mode.draw(cfg.safe_radius, cfg.reaction_jitter);
        mode.held = 0;
    } else if mode.active
        && mode.held >= cfg.min_hold
        && closest_approach(state.agent, nominal_u, state.obstacle, cfg.lookahead) > mode.hand_back
    {
        mode.active = false;
        mode.take_over = mode.draw(cfg.danger_radius, cfg.reaction_jitter);
    }
    mode.drift(cfg);
    if !mode.active {
        let (sin, cos) = mode.heading.sin_cos();
        let k = 1.0 - cfg.wander_slow * mode.pace.abs().min(1.0);
        let u = [k * (nominal_u[0] * cos - nominal_u[1] * sin), k * (nominal_u[0] * sin + nominal_u[1] * cos)];
        mode.last_u = u;
        return (u, 0.0);
    }
    let away = unit(sub(state.agent, state.obstacle));
    let t = evasion_dir(away, mode.side, cfg.evasion_angle);
    let g = unit(sub(env_cfg.goal, state.agent));
    let w = cfg.evasion_blend;
    let blend = [w * t[0] + (1.0 - w) * g[0], w * t[1] + (1.0 - w) * g[1]];
    let dir = if norm(blend) > 0.0 { unit(blend) } else { t };
    let u = [dir[0] * env_cfg.agent_max_speed, dir[1] * env_cfg.agent_max_speed];
    mode.last_u = u;
    mode.held += 1;
    (u, 1.0)
}

/// Smallest agent–obstacle distance over the next `steps` steps if the agent
/// keeps velocity `u` and the obstacle stays put, including now.
fn closest_approach(agent: Vec2, u: Vec2, obstacle: Vec2, steps: usize) -> f64 {
    let rel = sub(obstacle, agent);
    let uu = u[0] * u[0] + u[1] * u[1];
    let k = if uu > 0.0 {
        ((rel[0] * u[0] + rel[1] * u[1]) / uu).clamp(0.0, steps as f64)
    } else {
        0.0
    };
    dist([agent[0] + k * u[0], agent[1] + k * u[1]], obstacle)
}

/// SplitMix64 finalizer; derives per-attempt seeds from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Plays one teacher-driven game. Returns the recorded steps (world units)
/// and how it ended; a collision ends the game immediately.
pub fn play_episode(env_cfg: &EnvConfig, cfg: &TeacherConfig) -> (Vec<StepVector>, Outcome) {
    let mut state = env::reset(env_cfg);
    let mut mode = TeacherState::new(cfg, derive_seed(cfg.seed, env_cfg.seed));
    let mut steps = Vec::new();
    loop {
        let nominal = env::nominal_input(&state, env_cfg);
        let (u, p) = teach_input(&state, nominal, cfg, env_cfg, &mut mode);
        steps.push(StepVector { s: state.observation(), u, p });
        state = env::step(&state, u, env_cfg).expect("episode is running");
        if state.collided_ever {
            return (steps, Outcome::Collided);
        }
        match state.status {
            Status::Running => {}
            Status::ReachedGoal => {
                // Terminal record: the state at the goal, where the nominal
                // input is zero.
                steps.push(StepVector {
                    s: state.observation(),
                    u: env::nominal_input(&state, env_cfg),
                    p: 0.0,
                });
                return (steps, Outcome::ReachedGoal);
            }
            Status::Done => return (steps, Outcome::TimedOut),
        }
    }
}

/// Minimum attempts before the success rate is judged.
const JUDGE_AFTER: usize = 1000;
const MIN_SUCCESS_RATE: f64 = 0.05;

/// Runs teacher games until `n` collision-free successes are collected.
pub fn collect_episodes(
    env_cfg: &EnvConfig,
    teacher_cfg: &TeacherConfig,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("episode count must be at least 1".into()));
    }
    env_cfg.validate()?;
    teacher_cfg.validate()?;
    let max_attempts = JUDGE_AFTER.max(n * 20);
    let mut episodes = Vec::with_capacity(n);
    let mut attempts = 0;
    while episodes.len() < n {
        if attempts == max_attempts
            || (attempts == JUDGE_AFTER
                && (episodes.len() as f64) < MIN_SUCCESS_RATE * attempts as f64)
        {
            return Err(Error::CollectionFailed {
                successes: episodes.len(),
                attempts,
                needed: n,
            });
        }
        let episode_seed = derive_seed(seed, attempts as u64);
        attempts += 1;
        let cfg = EnvConfig {
            seed: episode_seed,
            ..env_cfg.clone()
        };
        let (steps, outcome) = play_episode(&cfg, teacher_cfg);
        if outcome != Outcome::ReachedGoal || steps.len() > env_cfg.max_steps {
            continue;
        }
        episodes.push(Episode {
            meta: EpisodeMeta {
                episode_id: episodes.len() as u64,
                seed: episode_seed,
                source: Source::Scripted,
                outcome,
            },
            steps,
        });
    }
    Ok(Dataset {
        header: DatasetHeader::new(env_cfg, seed),
        episodes,
    })
}

//! Closed-loop execution: observe, optimize the input through the model,
//! act, and feed the executed step back into the model's recurrent state.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Norm, StepVector};
use crate::env::{self, EnvConfig, Status, Vec2};
use crate::error::{Error, Result};
use crate::model::TrainedModel;
use crate::optimizer::{make_references, optimize_input, Condition, OptConfig};
use crate::teacher::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Terminal {
    ReachedGoal,
    TimedOut,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecStep {
    /// Environment step counter after executing this step.
    pub t: usize,
    /// Observation the input was chosen for (world units).
    pub s: [f64; 4],
    /// Executed velocity (world units per step).
    pub u: Vec2,
    pub p_predicted: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub condition: Condition,
    pub seed: u64,
    pub steps: Vec<ExecStep>,
    pub terminal: Terminal,
    pub collided_ever: bool,
    /// Environment step counter at termination.
    pub env_t: usize,
}

fn check_compatible(model: &TrainedModel, env_cfg: &EnvConfig) -> Result<()> {
    let expected = Norm::from_env(env_cfg);
    if model.norm != expected {
        return Err(Error::Shape(format!(
            "model was trained for world_size {} / max_speed {}, environment has {} / {}",
            model.norm.world_size, model.norm.max_speed, expected.world_size, expected.max_speed
        )));
    }
    Ok(())
}

/// Runs one episode with environment seed `seed`.
pub fn run_episode(model: &TrainedModel, env_cfg: &EnvConfig, opt_cfg: &OptConfig, seed: u64) -> Result<ExecutionRecord> {
    check_compatible(model, env_cfg)?;
    opt_cfg.validate()?;
    let env_cfg = EnvConfig {
        seed,
        ..env_cfg.clone()
    };
    let norm = model.norm;
    let mut state = env::reset(&env_cfg);
    let mut rec = model.initial_state();
    let nominal = env::nominal_input(&state, &env_cfg);
    let mut u_prev = [nominal[0] / norm.max_speed, nominal[1] / norm.max_speed];
    let mut p_prev = 0.0;
    let mut steps = Vec::new();

    let terminal = loop {
        match state.status {
            Status::ReachedGoal => break Terminal::ReachedGoal,
            Status::Done => break Terminal::TimedOut,
            Status::Running => {}
        }
        let s_t = state.observation().map(|v| v / norm.world_size);
        let refs = make_references(&state, &env_cfg);
        let out = optimize_input(model, &rec, s_t, u_prev, p_prev, &refs, opt_cfg)?;
        if opt_cfg.abort_enabled && out.p_pred >= opt_cfg.abort_threshold {
            break Terminal::Aborted;
        }
        let u_world = [out.u[0] * norm.max_speed, out.u[1] * norm.max_speed];
        let obs = state.observation();
        state = env::step(&state, u_world, &env_cfg)?;
        steps.push(ExecStep {
            t: state.t,
            s: obs,
            u: u_world,
            p_predicted: out.p_pred,
            final_loss: out.final_loss,
        });
        let executed = StepVector { s: s_t, u: out.u, p: out.p_pred };
        rec = model.predict_next(&rec, &executed)?.1;
        u_prev = out.u;
        p_prev = out.p_pred;
    };
    Ok(ExecutionRecord {
        condition: opt_cfg.condition,
        seed,
        steps,
        terminal,
        collided_ever: state.collided_ever,
        env_t: state.t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub condition: Condition,
    pub n_episodes: usize,
    pub reach_rate: f64,
    pub avoid_rate: f64,
    /// Mean steps over episodes that reached the goal; `None` if none did.
    pub avg_steps: Option<f64>,
    /// Mean steps over all episodes, counting non-reaching ones as
    /// `max_steps`.
    pub avg_steps_capped: f64,
    pub aborted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    /// Environment seed of episode `i`, shared by every condition.
    pub episode_seeds: Vec<u64>,
}

impl MetricsTable {
    pub fn row(&self, condition: Condition) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,n_episodes,reach_rate,avoid_rate,avg_steps,avg_steps_capped,aborted\n");
        for r in &self.rows {
            let avg = r.avg_steps.map(|v| format!("{v:.2}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{:.4},{:.4},{},{:.2},{}",
                r.condition, r.n_episodes, r.reach_rate, r.avoid_rate, avg, r.avg_steps_capped, r.aborted
            )
            .unwrap();
        }
        out
    }
}

/// Aggregates one condition's episodes.
pub fn summarize(condition: Condition, records: &[ExecutionRecord], max_steps: usize) -> MetricsRow {
    let n = records.len();
    let reached: Vec<&ExecutionRecord> = records.iter().filter(|r| r.terminal == Terminal::ReachedGoal).collect();
    let avoided = records.iter().filter(|r| !r.collided_ever).count();
    let avg_steps = if reached.is_empty() {
        None
    } else {
        Some(reached.iter().map(|r| r.env_t as f64).sum::<f64>() / reached.len() as f64)
    };
    let capped = records
        .iter()
        .map(|r| if r.terminal == Terminal::ReachedGoal { r.env_t } else { max_steps } as f64)
        .sum::<f64>()
        / n.max(1) as f64;
    MetricsRow {
        condition,
        n_episodes: n,
        reach_rate: reached.len() as f64 / n.max(1) as f64,
        avoid_rate: avoided as f64 / n.max(1) as f64,
        avg_steps,
        avg_steps_capped: capped,
        aborted: records.iter().filter(|r| r.terminal == Terminal::Aborted).count(),
    }
}

/// Runs `n_episodes` per condition. Episode `i` uses the same environment
/// seed under every condition.
pub fn evaluate(
    model: &TrainedModel,
    env_cfg: &EnvConfig,
    opt_base: &OptConfig,
    conditions: &[Condition],
    n_episodes: usize,
    seed: u64,
) -> Result<(MetricsTable, Vec<ExecutionRecord>)> {
    if n_episodes == 0 {
        return Err(Error::Config("n_episodes must be at least 1".into()));
    }
    check_compatible(model, env_cfg)?;
    let episode_seeds: Vec<u64> = (0..n_episodes as u64).map(|i| derive_seed(seed, i)).collect();
    let jobs: Vec<(Condition, u64)> = conditions
        .iter()
        .flat_map(|&c| episode_seeds.iter().map(move |&s| (c, s)))
        .collect();
    let records: Vec<ExecutionRecord> = jobs
        .par_iter()
        .map(|&(c, s)| run_episode(model, env_cfg, &opt_base.clone().with_condition(c), s))
        .collect::<Result<_>>()?;
    let rows = conditions
        .iter()
        .enumerate()
        .map(|(k, &c)| summarize(c, &records[k * n_episodes..(k + 1) * n_episodes], env_cfg.max_steps))
        .collect();
    Ok((MetricsTable { rows, episode_seeds }, records))
}

/// Published path-task results per condition: reach rate, avoid rate,
/// average steps.
pub const REFERENCE_TABLE: [(Condition, f64, f64, f64); 4] = [
    (Condition::NoBP, 0.88, 0.55, 54.0),
    (Condition::BPu, 1.00, 0.62, 48.0),
    (Condition::BPp, 0.76, 0.50, 147.0),
    (Condition::BPuP, 0.98, 0.90, 74.0),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The ordinal relationships between conditions that the reference results
/// exhibit.
pub fn ordinal_checks(table: &MetricsTable) -> Vec<Check> {
    let get = |c| table.row(c);
    let (Some(nobp), Some(bpu), Some(bpp), Some(bpup)) =
        (get(Condition::NoBP), get(Condition::BPu), get(Condition::BPp), get(Condition::BPuP))
    else {
        return vec![Check {
            name: "all four conditions evaluated".into(),
            passed: false,
            detail: "missing condition rows".into(),
        }];
    };
    let steps_ratio = match (bpp.avg_steps, bpu.avg_steps) {
        (Some(p), Some(u)) if u > 0.0 => p / u,
        _ => f64::NAN,
    };
    vec![
        Check {
            name: "avoid(bpup) >= avoid(nobp) + 0.15".into(),
            passed: bpup.avoid_rate >= nobp.avoid_rate + 0.15,
            detail: format!("{:.3} vs {:.3}", bpup.avoid_rate, nobp.avoid_rate),
        },
        Check {
            name: "avoid(bpup) >= avoid(bpu) + 0.10".into(),
            passed: bpup.avoid_rate >= bpu.avoid_rate + 0.10,
            detail: format!("{:.3} vs {:.3}", bpup.avoid_rate, bpu.avoid_rate),
        },
        Check {
            name: "reach(bpu) >= 0.95".into(),
            passed: bpu.reach_rate >= 0.95,
            detail: format!("{:.3}", bpu.reach_rate),
        },
        Check {
            name: "avg_steps(bpp) >= 1.3 * avg_steps(bpu)".into(),
            passed: steps_ratio >= 1.3,
            detail: format!("ratio {steps_ratio:.3}"),
        },
        Check {
            name: "reach(bpup) >= reach(bpp)".into(),
            passed: bpup.reach_rate >= bpp.reach_rate,
            detail: format!("{:.3} vs {:.3}", bpup.reach_rate, bpp.reach_rate),
        },
    ]
}

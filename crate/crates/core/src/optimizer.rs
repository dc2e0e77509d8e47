//! Online input optimization: hold the trained weights fixed and descend the
//! loss between the model's next-step prediction and constant references
//! with respect to the control input.
//!
//! Each iteration predicts `x_{τ+1}` from `(s_t, u, p)` and the history held
//! in the recurrent state, pushes the prediction into a short window, and
//! takes a fixed-length step against the normalized gradient
//! `g = ∂L/∂u`, followed by a box clamp.
//!
//! The window holds the previous `δ` predictions of the same call, where
//! `δ = min(τ − 1, δ_max)`. Only the newest prediction carries gradient;
//! older ones enter the loss as constants.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{StepVector, STEP_DIM, S_DIM, U_DIM};
use crate::env::{sub, unit, EnvConfig, EnvState};
use crate::error::{Error, Result};
use crate::model::{decode_output, TrainedModel};
use crate::nn::{self, bce, bce_logit_grad, RecurrentState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Execute the model's own `u` prediction.
    #[serde(rename = "nobp")]
    NoBP,
    /// Backpropagate the `u` error only.
    #[serde(rename = "bpu")]
    BPu,
    /// Backpropagate the `p` error only.
    #[serde(rename = "bpp")]
    BPp,
    /// Backpropagate both.
    #[serde(rename = "bpup")]
    BPuP,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::NoBP, Condition::BPu, Condition::BPp, Condition::BPuP];

    pub fn name(&self) -> &'static str {
        match self {
            Condition::NoBP => "nobp",
            Condition::BPu => "bpu",
            Condition::BPp => "bpp",
            Condition::BPuP => "bpup",
        }
    }

    /// Default `(β_s, β_u, β_p)`.
    pub fn default_betas(&self) -> Betas {
        match self {
            Condition::NoBP => Betas { s: 0.0, u: 0.0, p: 0.0 },
            Condition::BPu => Betas { s: 0.0, u: 1.0, p: 0.0 },
            Condition::BPp => Betas { s: 0.0, u: 0.0, p: 1.0 },
            Condition::BPuP => Betas { s: 0.0, u: 1.0, p: 1.0 },
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown condition {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub s: f64,
    pub u: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub condition: Condition,
    /// Loss weights; [`OptConfig::with_condition`] resets them to the
    /// condition's defaults.
    pub betas: Betas,
    /// Length of each normalized-gradient step (normalized velocity units).
    pub step_size: f64,
    pub iterations: usize,
    pub u_min: [f64; U_DIM],
    pub u_max: [f64; U_DIM],
    pub delta_max: usize,
    pub abort_enabled: bool,
    pub abort_threshold: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            condition: Condition::BPuP,
            betas: Condition::BPuP.default_betas(),
            step_size: 0.05,
            iterations: 5,
            u_min: [-1.0, -1.0],
            u_max: [1.0, 1.0],
            delta_max: 3,
            abort_enabled: false,
            abort_threshold: 0.8,
        }
    }
}

impl OptConfig {
    pub fn with_condition(mut self, condition: Condition) -> Self {
        self.condition = condition;
        self.betas = condition.default_betas();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config("optimizer step_size must be positive".into()));
        }
        if self.u_min.iter().zip(&self.u_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("u_min must be below u_max componentwise".into()));
        }
        let b = self.betas;
        if [b.s, b.u, b.p].iter().any(|v| *v < 0.0) {
            return Err(Error::Config("betas must be ≥ 0".into()));
        }
        if !(self.abort_threshold >= 0.0 && self.abort_threshold.is_finite()) {
            return Err(Error::Config("abort_threshold must be finite and ≥ 0".into()));
        }
        Ok(())
    }

    pub fn clamp(&self, u: [f64; U_DIM]) -> [f64; U_DIM] {
        [
            u[0].clamp(self.u_min[0], self.u_max[0]),
            u[1].clamp(self.u_min[1], self.u_max[1]),
        ]
    }
}

/// Constant targets for the optimization loss (normalized units).
#[derive(Debug, Clone, PartialEq)]
pub struct References {
    pub s_ref: Option<[f64; S_DIM]>,
    pub u_ref: Option<[f64; U_DIM]>,
    pub p_ref: f64,
}

/// Goal-direction velocity at full speed; no state reference; zero assistance.
pub fn make_references(state: &EnvState, env_cfg: &EnvConfig) -> References {
    let to_goal = sub(env_cfg.goal, state.agent);
    let u_ref = if crate::env::norm(to_goal) < env_cfg.goal_radius {
        [0.0, 0.0]
    } else {
        unit(to_goal)
    };
    References {
        s_ref: None,
        u_ref: Some(u_ref),
        p_ref: 0.0,
    }
}

/// Recent raw predictions within one optimize call, newest last.
#[derive(Debug, Clone)]
pub struct PredictionWindow {
    entries: VecDeque<Vec<f64>>,
    capacity: usize,
}

impl PredictionWindow {
    pub fn new(delta_max: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(delta_max + 1),
            capacity: delta_max + 1,
        }
    }

    pub fn push(&mut self, raw_output: Vec<f64>) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(raw_output);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries before the newest one.
    pub fn prior(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    fn newest(&self) -> Option<&Vec<f64>> {
        self.entries.back()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowLoss {
    pub total: f64,
    pub s: f64,
    pub u: f64,
    pub p: f64,
    /// ∂total/∂(raw newest output).
    pub grad: [f64; STEP_DIM],
}

/// Window-averaged losses against constant references, combined with `β`.
pub fn window_loss(window: &PredictionWindow, refs: &References, betas: Betas) -> Result<WindowLoss> {
    let Some(newest) = window.newest() else {
        return Err(Error::Config("window_loss needs at least one prediction".into()));
    };
    if betas.s > 0.0 && refs.s_ref.is_none() {
        return Err(Error::MissingReference("s_ref is required when beta_s > 0"));
    }
    if betas.u > 0.0 && refs.u_ref.is_none() {
        return Err(Error::MissingReference("u_ref is required when beta_u > 0"));
    }
    let n = window.len() as f64;
    let decoded: Vec<StepVector> = window.entries.iter().map(|y| decode_output(y)).collect();
    let mut grad = [0.0; STEP_DIM];

    let mut l_s = 0.0;
    if let Some(s_ref) = refs.s_ref {
        for x in &decoded {
            l_s += x.s.iter().zip(&s_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        l_s /= n * S_DIM as f64;
        for k in 0..S_DIM {
            grad[k] = betas.s * 2.0 * (newest[k] - s_ref[k]) / (n * S_DIM as f64);
        }
    }
    let mut l_u = 0.0;
    if let Some(u_ref) = refs.u_ref {
        for x in &decoded {
            l_u += x.u.iter().zip(&u_ref).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        l_u /= n * U_DIM as f64;
        for k in 0..U_DIM {
            grad[S_DIM + k] = betas.u * 2.0 * (newest[S_DIM + k] - u_ref[k]) / (n * U_DIM as f64);
        }
    }
    let l_p = decoded.iter().map(|x| bce(x.p, refs.p_ref)).sum::<f64>() / n;
    grad[STEP_DIM - 1] = betas.p * bce_logit_grad(newest[STEP_DIM - 1], refs.p_ref) / n;

    Ok(WindowLoss {
        total: betas.s * l_s + betas.u * l_u + betas.p * l_p,
        s: l_s,
        u: l_u,
        p: l_p,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptOutcome {
    /// Predicted control to execute (normalized, clamped).
    pub u: [f64; U_DIM],
    /// The optimized input the prediction was made from.
    pub input: [f64; U_DIM],
    /// Predicted assistance rate for the returned input.
    pub p_pred: f64,
    /// `L_τ` at the first and at the last iteration; zero when no
    /// iterations ran.
    pub first_loss: f64,
    pub final_loss: f64,
    /// Updates actually applied (zero-gradient iterations are skipped).
    pub updates: usize,
    /// Set when a non-finite loss stopped the loop and `u_init` was returned.
    pub aborted: bool,
}

/// `u − ε·g/‖g‖`, clamped to the input box. `None` for a zero or
/// non-finite gradient.
pub fn descent_step(u: [f64; U_DIM], g: [f64; U_DIM], cfg: &OptConfig) -> Option<[f64; U_DIM]> {
    let g_norm = g[0].hypot(g[1]);
    if !(g_norm > 0.0 && g_norm.is_finite()) {
        return None;
    }
    Some(cfg.clamp([
        u[0] - cfg.step_size * g[0] / g_norm,
        u[1] - cfg.step_size * g[1] / g_norm,
    ]))
}

/// One forward step from a copy of `state`; returns the raw output and the
/// gradient-ready trace.
fn forward(model: &TrainedModel, state: &RecurrentState, x: &StepVector) -> Result<(Vec<f64>, nn::Trace)> {
    let trace = nn::forward_sequence(&model.params, &[x.to_array()], state)?;
    let y = trace.outputs[0].clone();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelCorrupt);
    }
    Ok((y, trace))
}

/// Appends the prediction for `x` to a copy of `window` and returns that
/// prediction, the window loss, and `∂L/∂u` at `x.u`. Earlier window entries
/// are constants.
pub fn input_gradient(
    model: &TrainedModel,
    state: &RecurrentState,
    x: &StepVector,
    window: &PredictionWindow,
    refs: &References,
    betas: Betas,
) -> Result<(Vec<f64>, WindowLoss, [f64; U_DIM])> {
    let (y, trace) = forward(model, state, x)?;
    let mut window = window.clone();
    window.push(y.clone());
    let loss = window_loss(&window, refs, betas)?;
    let (_, grad_inputs) = nn::backward_trace(&model.params, &trace, &[loss.grad.to_vec()])?;
    let g = [grad_inputs[0][S_DIM], grad_inputs[0][S_DIM + 1]];
    Ok((y, loss, g))
}

/// Optimizes the control input for the current state `s_t` (normalized).
///
/// The input slot `u` of `x = (s_t, u, p_init)` starts at `u_init` and takes
/// `cfg.iterations` normalized gradient steps on the window loss; `p_init`
/// is held fixed. The returned `u` and `p_pred` are the model's prediction
/// from the optimized input, so [`Condition::NoBP`] (no iterations) returns
/// the plain model prediction. `state` is only read.
pub fn optimize_input(
    model: &TrainedModel,
    state: &RecurrentState,
    s_t: [f64; S_DIM],
    u_init: [f64; U_DIM],
    p_init: f64,
    refs: &References,
    cfg: &OptConfig,
) -> Result<OptOutcome> {
    let iterations = if cfg.condition == Condition::NoBP { 0 } else { cfg.iterations };
    let mut u = cfg.clamp(u_init);
    let mut window = PredictionWindow::new(cfg.delta_max);
    let mut first_loss = 0.0;
    let mut final_loss = 0.0;
    let mut updates = 0;
    for tau in 0..iterations {
        let x = StepVector { s: s_t, u, p: p_init };
        let (y, loss, g) = input_gradient(model, state, &x, &window, refs, cfg.betas)?;
        window.push(y);
        if !loss.total.is_finite() {
            let (y, _) = forward(model, state, &StepVector { s: s_t, u: u_init, p: p_init })?;
            return Ok(OptOutcome {
                u: u_init,
                input: u_init,
                p_pred: decode_output(&y).p,
                first_loss,
                final_loss: loss.total,
                updates,
                aborted: true,
            });
        }
        if tau == 0 {
            first_loss = loss.total;
        }
        final_loss = loss.total;
        if let Some(next) = descent_step(u, g, cfg) {
            u = next;
            updates += 1;
        }
    }
    let (y, _) = forward(model, state, &StepVector { s: s_t, u, p: p_init })?;
    let pred = decode_output(&y);
    Ok(OptOutcome {
        u: cfg.clamp(pred.u),
        input: u,
        p_pred: pred.p,
        first_loss,
        final_loss,
        updates,
        aborted: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Norm;
    use crate::model::ModelConfig;
    use crate::nn::LstmParams;

    fn raw(s: [f64; 4], u: [f64; 2], p_logit: f64) -> Vec<f64> {
        let mut y = s.to_vec();
        y.extend_from_slice(&u);
        y.push(p_logit);
        y
    }

    fn refs() -> References {
        References { s_ref: None, u_ref: Some([0.6, 0.8]), p_ref: 0.0 }
    }

    /// Zero LSTM with a bias-only head: predictions ignore the input.
    fn constant_model(k: f64) -> TrainedModel {
        let mut params = LstmParams::zeros(7, 1, 7);
        params.blocks_mut()[4].copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 0.3, 0.4, k]);
        TrainedModel {
            params,
            norm: Norm { world_size: 128.0, max_speed: 3.5 },
            config: ModelConfig { hidden_dim: 1, ..ModelConfig::default() },
            loss_curve: vec![],
            provenance: None,
        }
    }

    #[test]
    fn window_loss_on_references_is_zero() {
        let mut w = PredictionWindow::new(3);
        w.push(raw([0.0; 4], [0.6, 0.8], -40.0));
        let l = window_loss(&w, &refs(), Betas { s: 0.0, u: 1.0, p: 1.0 }).unwrap();
        assert!(l.total < 1e-6, "{}", l.total);
    }

    #[test]
    fn window_loss_u_offset() {
        let mut w = PredictionWindow::new(3);
        w.push(raw([0.0; 4], [0.7, 0.8], 0.0));
        let l = window_loss(&w, &refs(), Betas { s: 0.0, u: 1.0, p: 0.0 }).unwrap();
        assert!((l.total - 0.005).abs() < 1e-15);
    }

    #[test]
    fn window_loss_is_linear_in_betas() {
        let mut w = PredictionWindow::new(3);
        for k in 0..4 {
            w.push(raw([0.1 * k as f64; 4], [0.2, -0.3 * k as f64], 0.4 - k as f64));
        }
        let r = References { s_ref: Some([0.5; 4]), ..refs() };
        let b = Betas { s: 0.3, u: 1.7, p: 0.9 };
        let full = window_loss(&w, &r, b).unwrap();
        let part = |s, u, p| window_loss(&w, &r, Betas { s, u, p }).unwrap().total;
        let lin = b.s * part(1.0, 0.0, 0.0) + b.u * part(0.0, 1.0, 0.0) + b.p * part(0.0, 0.0, 1.0);
        assert_eq!(full.total, lin);
    }

    #[test]
    fn missing_s_ref_is_an_error() {
        let mut w = PredictionWindow::new(3);
        w.push(raw([0.0; 4], [0.0; 2], 0.0));
        let err = window_loss(&w, &refs(), Betas { s: 1.0, u: 0.0, p: 0.0 }).unwrap_err();
        assert!(matches!(err, Error::MissingReference(_)));
        let empty = PredictionWindow::new(3);
        assert!(window_loss(&empty, &refs(), Betas { s: 0.0, u: 1.0, p: 0.0 }).is_err());
    }

    #[test]
    fn window_growth_follows_delta_rule() {
        let mut w = PredictionWindow::new(3);
        let mut prior = vec![];
        for _tau in 1..=6 {
            w.push(raw([0.0; 4], [0.0; 2], 0.0));
            prior.push(w.prior());
        }
        // δ = τ − 1 while τ < 4, then 3.
        assert_eq!(prior, vec![0, 1, 2, 3, 3, 3]);
    }

    #[test]
    fn nobp_returns_model_prediction() {
        let model = constant_model(0.0);
        let cfg = OptConfig::default().with_condition(Condition::NoBP);
        let out = optimize_input(&model, &model.initial_state(), [0.1; 4], [-0.5, 0.5], 0.0, &refs(), &cfg).unwrap();
        assert_eq!(out.u, [0.3, 0.4]);
        assert_eq!(out.p_pred, 0.5);
        assert_eq!(out.updates, 0);
    }

    #[test]
    fn constant_model_has_zero_gradient_and_skips() {
        let model = constant_model(0.0);
        let cfg = OptConfig::default().with_condition(Condition::BPuP);
        let state = model.initial_state();
        let out = optimize_input(&model, &state, [0.1; 4], [0.2, 0.2], 0.0, &refs(), &cfg).unwrap();
        assert_eq!(out.input, [0.2, 0.2]);
        assert_eq!(out.u, [0.3, 0.4]);
        assert_eq!(out.updates, 0);
        assert_eq!(state, model.initial_state());
    }

    #[test]
    fn normalized_step_examples() {
        let cfg = OptConfig { step_size: 0.1, ..OptConfig::default() };
        let next = descent_step([0.0, 0.0], [3.0, 4.0], &cfg).unwrap();
        assert!((next[0] + 0.06).abs() < 1e-15 && (next[1] + 0.08).abs() < 1e-15);
        // Gradient pushes past u_max: stays on the boundary.
        assert_eq!(descent_step([1.0, 1.0], [-1.0, -2.0], &cfg).unwrap(), [1.0, 1.0]);
        assert_eq!(descent_step([0.5, 0.5], [0.0, 0.0], &cfg), None);
    }

    #[test]
    fn default_references_for_path_task() {
        let cfg = EnvConfig::default();
        let s = crate::env::reset(&cfg);
        let r = make_references(&s, &cfg);
        let k = 1.0 / 2f64.sqrt();
        let u = r.u_ref.unwrap();
        assert!((u[0] - k).abs() < 1e-15 && (u[1] - k).abs() < 1e-15);
        assert_eq!(r.p_ref, 0.0);
        assert!(r.s_ref.is_none());
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.name().parse::<Condition>().unwrap(), c);
        }
        assert!("bogus".parse::<Condition>().is_err());
    }
}

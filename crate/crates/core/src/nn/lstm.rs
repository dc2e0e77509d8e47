//! Single-layer LSTM with a linear output head.
//!
//! Parameters live in one contiguous buffer so the optimizer, the model file
//! and finite-difference checks can treat them as a flat slice. Layout, in
//! order:
//!
//! | block   | shape                    |
//! |---------|--------------------------|
//! | `w_ih`  | `4·hidden × input`       |
//! | `w_hh`  | `4·hidden × hidden`      |
//! | `b`     | `4·hidden`               |
//! | `w_out` | `output × hidden`        |
//! | `b_out` | `output`                 |
//!
//! All matrices are row-major. Within every `4·hidden` block the gate rows
//! are stacked as input, forget, cell, output. The model file format relies
//! on this ordering, so it must not change.
//!
//! Cell update for input `x` and state `(h, c)`:
//!
//! ```text
//! a  = W_ih·x + W_hh·h + b
//! i  = σ(a_i)   f = σ(a_f)   g = tanh(a_g)   o = σ(a_o)
//! c' = f⊙c + i⊙g
//! h' = o⊙tanh(c')
//! y  = W_out·h' + b_out
//! ```
//!
//! The head is linear; callers apply any output activation themselves.

use std::ops::Range;

use rand::Rng;

use super::loss::sigmoid;
use crate::error::{Error, Result};

/// Number of stacked gate blocks.
pub const GATES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    data: Vec<f64>,
}

impl LstmParams {
    pub fn param_count(input_dim: usize, hidden_dim: usize, output_dim: usize) -> usize {
        let g = GATES * hidden_dim;
        g * input_dim + g * hidden_dim + g + output_dim * hidden_dim + output_dim
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            data: vec![0.0; Self::param_count(input_dim, hidden_dim, output_dim)],
        }
    }

    /// Uniform init in `±1/√hidden`, the usual LSTM default.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let k = 1.0 / (hidden_dim as f64).sqrt();
        let mut params = Self::zeros(input_dim, hidden_dim, output_dim);
        for w in params.data.iter_mut() {
            *w = rng.random_range(-k..k);
        }
        params
    }

    /// Rebuilds parameters from a flat buffer laid out as documented above.
    pub fn from_flat(
        input_dim: usize,
        hidden_dim: usize,
        output_dim: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let expected = Self::param_count(input_dim, hidden_dim, output_dim);
        if data.len() != expected {
            return Err(Error::Dimension {
                context: "lstm parameter buffer",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            output_dim,
            data,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|w| w.is_finite())
    }

    fn ranges(&self) -> [Range<usize>; 5] {
        let g = GATES * self.hidden_dim;
        let w_ih = 0..g * self.input_dim;
        let w_hh = w_ih.end..w_ih.end + g * self.hidden_dim;
        let b = w_hh.end..w_hh.end + g;
        let w_out = b.end..b.end + self.output_dim * self.hidden_dim;
        let b_out = w_out.end..w_out.end + self.output_dim;
        [w_ih, w_hh, b, w_out, b_out]
    }

    pub fn w_ih(&self) -> &[f64] {
        &self.data[self.ranges()[0].clone()]
    }

    pub fn w_hh(&self) -> &[f64] {
        &self.data[self.ranges()[1].clone()]
    }

    pub fn b(&self) -> &[f64] {
        &self.data[self.ranges()[2].clone()]
    }

    pub fn w_out(&self) -> &[f64] {
        &self.data[self.ranges()[3].clone()]
    }

    pub fn b_out(&self) -> &[f64] {
        &self.data[self.ranges()[4].clone()]
    }

    /// Mutable views of all five blocks at once.
    pub fn blocks_mut(&mut self) -> [&mut [f64]; 5] {
        let [r0, r1, r2, r3, _] = self.ranges();
        let (w_ih, rest) = self.data.split_at_mut(r0.end);
        let (w_hh, rest) = rest.split_at_mut(r1.len());
        let (b, rest) = rest.split_at_mut(r2.len());
        let (w_out, b_out) = rest.split_at_mut(r3.len());
        [w_ih, w_hh, b, w_out, b_out]
    }

    /// Adds `other` into `self` elementwise (gradient accumulation).
    pub fn add_assign(&mut self, other: &LstmParams) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.data.iter_mut() {
            *a *= factor;
        }
    }
}

/// Hidden and cell state carried between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(hidden_dim: usize) -> Self {
        Self {
            h: vec![0.0; hidden_dim],
            c: vec![0.0; hidden_dim],
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, stacked i, f, g, o.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// out += M·v for row-major `M` (rows × cols).
fn matvec_add(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (row, o) in m.chunks_exact(cols).zip(out.iter_mut()) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out += Mᵀ·v for row-major `M` (rows × cols).
fn matvec_t_add(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (row, &vi) in m.chunks_exact(cols).zip(v) {
        if vi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vi;
        }
    }
}

/// M += a ⊗ b.
fn outer_add(m: &mut [f64], cols: usize, a: &[f64], b: &[f64]) {
    for (row, &ai) in m.chunks_exact_mut(cols).zip(a) {
        if ai == 0.0 {
            continue;
        }
        for (w, bj) in row.iter_mut().zip(b) {
            *w += ai * bj;
        }
    }
}

fn check_input(params: &LstmParams, x: &[f64], state: &RecurrentState) -> Result<()> {
    if x.len() != params.input_dim {
        return Err(Error::Dimension {
            context: "lstm input",
            expected: params.input_dim,
            actual: x.len(),
        });
    }
    if state.h.len() != params.hidden_dim || state.c.len() != params.hidden_dim {
        return Err(Error::Dimension {
            context: "recurrent state",
            expected: params.hidden_dim,
            actual: state.h.len().max(state.c.len()),
        });
    }
    Ok(())
}

fn forward_unchecked(
    params: &LstmParams,
    x: &[f64],
    state: &RecurrentState,
) -> (Vec<f64>, RecurrentState, StepCache) {
    let hd = params.hidden_dim;
    let mut a = params.b().to_vec();
    matvec_add(params.w_ih(), params.input_dim, x, &mut a);
    matvec_add(params.w_hh(), hd, &state.h, &mut a);

    let mut gates = a;
    for (k, v) in gates.iter_mut().enumerate() {
        *v = if k / hd == 2 { v.tanh() } else { sigmoid(*v) };
    }
    let (ig, rest) = gates.split_at(hd);
    let (fg, rest) = rest.split_at(hd);
    let (gg, og) = rest.split_at(hd);

    let mut c = vec![0.0; hd];
    let mut tanh_c = vec![0.0; hd];
    let mut h = vec![0.0; hd];
    for j in 0..hd {
        c[j] = fg[j] * state.c[j] + ig[j] * gg[j];
        tanh_c[j] = c[j].tanh();
        h[j] = og[j] * tanh_c[j];
    }

    let mut y = params.b_out().to_vec();
    matvec_add(params.w_out(), hd, &h, &mut y);

    let cache = StepCache {
        x: x.to_vec(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        gates,
        tanh_c,
        h: h.clone(),
    };
    (y, RecurrentState { h, c }, cache)
}

/// One cell update followed by the linear head. Pure.
pub fn lstm_step(
    params: &LstmParams,
    x: &[f64],
    state: &RecurrentState,
) -> Result<(Vec<f64>, RecurrentState)> {
    check_input(params, x, state)?;
    let (y, next, _) = forward_unchecked(params, x, state);
    Ok((y, next))
}

/// Forward pass over a whole sequence, keeping what `backward` needs.
#[derive(Debug, Clone)]
pub struct Trace {
    caches: Vec<StepCache>,
    pub outputs: Vec<Vec<f64>>,
    pub final_state: RecurrentState,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.caches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.caches.is_empty()
    }
}

pub fn forward_sequence<X: AsRef<[f64]>>(
    params: &LstmParams,
    inputs: &[X],
    init: &RecurrentState,
) -> Result<Trace> {
    let mut state = init.clone();
    let mut caches = Vec::with_capacity(inputs.len());
    let mut outputs = Vec::with_capacity(inputs.len());
    for x in inputs {
        let x = x.as_ref();
        check_input(params, x, &state)?;
        let (y, next, cache) = forward_unchecked(params, x, &state);
        caches.push(cache);
        outputs.push(y);
        state = next;
    }
    Ok(Trace {
        caches,
        outputs,
        final_state: state,
    })
}

/// A scalar loss that decomposes over the outputs of a sequence.
pub trait StepLoss {
    /// Loss contribution of output `y` at step `t`; writes ∂loss/∂y into `grad`.
    fn step_loss(&self, t: usize, y: &[f64], grad: &mut [f64]) -> f64;
}

impl<F: Fn(usize, &[f64], &mut [f64]) -> f64> StepLoss for F {
    fn step_loss(&self, t: usize, y: &[f64], grad: &mut [f64]) -> f64 {
        self(t, y, grad)
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    /// ∂loss/∂params, same layout as [`LstmParams`].
    pub params: LstmParams,
    /// ∂loss/∂x for every input step.
    pub inputs: Vec<Vec<f64>>,
}

/// Reverse-mode gradients through time, given ∂loss/∂y for every step.
pub fn backward_trace(params: &LstmParams, trace: &Trace, output_grads: &[Vec<f64>]) -> Result<(LstmParams, Vec<Vec<f64>>)> {
    if output_grads.len() != trace.len() {
        return Err(Error::Dimension {
            context: "output gradients",
            expected: trace.len(),
            actual: output_grads.len(),
        });
    }
    let hd = params.hidden_dim;
    let id = params.input_dim;
    let mut grads = LstmParams::zeros(id, hd, params.output_dim);
    let mut grad_inputs = vec![Vec::new(); trace.len()];
    let mut dh_next = vec![0.0; hd];
    let mut dc_next = vec![0.0; hd];
    let mut da = vec![0.0; GATES * hd];

    for (t, cache) in trace.caches.iter().enumerate().rev() {
        let dy = &output_grads[t];
        let [g_w_ih, g_w_hh, g_b, g_w_out, g_b_out] = grads.blocks_mut();

        outer_add(g_w_out, hd, dy, &cache.h);
        for (gb, d) in g_b_out.iter_mut().zip(dy) {
            *gb += d;
        }
        let mut dh = dh_next.clone();
        matvec_t_add(params.w_out(), hd, dy, &mut dh);

        let (ig, rest) = cache.gates.split_at(hd);
        let (fg, rest) = rest.split_at(hd);
        let (gg, og) = rest.split_at(hd);
        for j in 0..hd {
            let tc = cache.tanh_c[j];
            let dc = dc_next[j] + dh[j] * og[j] * (1.0 - tc * tc);
            let d_o = dh[j] * tc;
            let d_i = dc * gg[j];
            let d_g = dc * ig[j];
            let d_f = dc * cache.c_prev[j];
            da[j] = d_i * ig[j] * (1.0 - ig[j]);
            da[hd + j] = d_f * fg[j] * (1.0 - fg[j]);
            da[2 * hd + j] = d_g * (1.0 - gg[j] * gg[j]);
            da[3 * hd + j] = d_o * og[j] * (1.0 - og[j]);
            dc_next[j] = dc * fg[j];
        }

        outer_add(g_w_ih, id, &da, &cache.x);
        outer_add(g_w_hh, hd, &da, &cache.h_prev);
        for (gb, d) in g_b.iter_mut().zip(&da) {
            *gb += d;
        }

        let mut dx = vec![0.0; id];
        matvec_t_add(params.w_ih(), id, &da, &mut dx);
        grad_inputs[t] = dx;

        dh_next.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_add(params.w_hh(), hd, &da, &mut dh_next);
    }
    Ok((grads, grad_inputs))
}

/// Runs the sequence forward from `init`, evaluates `loss` on every output and
/// returns the total loss with its gradients w.r.t. parameters and inputs.
pub fn backward<X: AsRef<[f64]>>(
    params: &LstmParams,
    inputs: &[X],
    init: &RecurrentState,
    loss: &impl StepLoss,
) -> Result<Gradients> {
    let trace = forward_sequence(params, inputs, init)?;
    let mut total = 0.0;
    let mut output_grads = Vec::with_capacity(trace.len());
    for (t, y) in trace.outputs.iter().enumerate() {
        let mut g = vec![0.0; y.len()];
        let l = loss.step_loss(t, y, &mut g);
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { step: t });
        }
        total += l;
        output_grads.push(g);
    }
    let (grads, grad_inputs) = backward_trace(params, &trace, &output_grads)?;
    Ok(Gradients {
        loss: total,
        params: grads,
        inputs: grad_inputs,
    })
}

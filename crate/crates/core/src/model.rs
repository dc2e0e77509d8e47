//! Autoregressive dynamics model over packed steps `x = (s, u, p)`.
//!
//! The network reads `x_t` and predicts `x_{t+1}`. The `s` and `u` heads are
//! linear; the `p` head goes through a logistic sigmoid so the predicted
//! assistance rate is always in `(0, 1)`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Episode, Norm, StepVector, STEP_DIM, S_DIM, U_DIM};
use crate::error::{Error, Result};
use crate::nn::{self, bce, bce_logit_grad, sigmoid, AdamConfig, AdamState, LstmParams, RecurrentState};

const P_INDEX: usize = STEP_DIM - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub alpha_s: f64,
    pub alpha_u: f64,
    pub alpha_p: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: STEP_DIM,
            hidden_dim: 32,
            output_dim: STEP_DIM,
            alpha_s: 1.0,
            alpha_u: 1.0,
            alpha_p: 1.0,
            lr: 1e-3,
            batch_size: 4,
            epochs: 2000,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim != STEP_DIM || self.output_dim != STEP_DIM {
            return Err(Error::Config(format!(
                "model input/output dims must be {STEP_DIM} for (s, u, p) steps"
            )));
        }
        if self.hidden_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("hidden_dim and batch_size must be positive".into()));
        }
        let alphas = [self.alpha_s, self.alpha_u, self.alpha_p];
        if alphas.iter().any(|a| *a < 0.0) || alphas.iter().all(|a| *a == 0.0) {
            return Err(Error::Config("loss weights must be ≥ 0 and not all zero".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn alphas(&self) -> LossWeights {
        LossWeights {
            s: self.alpha_s,
            u: self.alpha_u,
            p: self.alpha_p,
        }
    }
}

/// Weights of the `s`, `u` and `p` loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub s: f64,
    pub u: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub s: f64,
    pub u: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: LstmParams,
    pub norm: Norm,
    pub config: ModelConfig,
    pub loss_curve: Vec<f64>,
    /// Run configuration the model was trained under, if known.
    pub provenance: Option<serde_json::Value>,
}

/// Maps raw network outputs to a step: identity for `s` and `u`, sigmoid for `p`.
pub fn decode_output(y: &[f64]) -> StepVector {
    StepVector {
        s: y[..S_DIM].try_into().unwrap(),
        u: y[S_DIM..S_DIM + U_DIM].try_into().unwrap(),
        p: sigmoid(y[P_INDEX]),
    }
}

impl TrainedModel {
    /// Fresh, untrained model with the configured init.
    pub fn init(config: &ModelConfig, norm: Norm) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self {
            params: LstmParams::random(config.input_dim, config.hidden_dim, config.output_dim, &mut rng),
            norm,
            config: config.clone(),
            loss_curve: Vec::new(),
            provenance: None,
        }
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState::zeros(self.params.hidden_dim())
    }

    /// One-step prediction `x_{t+1}` from normalized `x_t`, advancing the
    /// recurrent state that carries the history.
    pub fn predict_next(&self, state: &RecurrentState, x: &StepVector) -> Result<(StepVector, RecurrentState)> {
        let (y, next) = nn::lstm_step(&self.params, &x.to_array(), state)?;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelCorrupt);
        }
        Ok((decode_output(&y), next))
    }
}

/// Component losses of a predicted sequence against the actual one, each
/// averaged over time (and over components for `s` and `u`).
pub fn sequence_loss(pred: &[StepVector], actual: &[StepVector], w: LossWeights) -> Result<LossParts> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::Dimension {
            context: "sequence loss",
            expected: actual.len(),
            actual: pred.len(),
        });
    }
    let flat = |xs: &[StepVector], f: fn(&StepVector) -> Vec<f64>| -> Vec<f64> { xs.iter().flat_map(f).collect() };
    let l_s = nn::mse(&flat(pred, |x| x.s.to_vec()), &flat(actual, |x| x.s.to_vec()))?;
    let l_u = nn::mse(&flat(pred, |x| x.u.to_vec()), &flat(actual, |x| x.u.to_vec()))?;
    let l_p = pred.iter().zip(actual).map(|(a, b)| bce(a.p, b.p)).sum::<f64>() / pred.len() as f64;
    Ok(LossParts {
        total: w.s * l_s + w.u * l_u + w.p * l_p,
        s: l_s,
        u: l_u,
        p: l_p,
    })
}

/// Teacher-forced loss and gradient for one normalized episode: inputs
/// `x_1..x_{T-1}`, targets `x_2..x_T`.
pub fn episode_gradients(params: &LstmParams, episode: &Episode, w: LossWeights) -> Result<(LossParts, LstmParams)> {
    let t_len = episode.len();
    if t_len < 2 {
        return Err(Error::EpisodeTooShort {
            episode: episode.meta.episode_id as usize,
            len: t_len,
        });
    }
    let inputs: Vec<[f64; STEP_DIM]> = episode.steps[..t_len - 1].iter().map(StepVector::to_array).collect();
    let targets = &episode.steps[1..];
    let n = (t_len - 1) as f64;
    let cs = w.s * 2.0 / (n * S_DIM as f64);
    let cu = w.u * 2.0 / (n * U_DIM as f64);
    let cp = w.p / n;

    let loss = |t: usize, y: &[f64], g: &mut [f64]| -> f64 {
        let target = &targets[t];
        for k in 0..S_DIM {
            g[k] = cs * (y[k] - target.s[k]);
        }
        for k in 0..U_DIM {
            g[S_DIM + k] = cu * (y[S_DIM + k] - target.u[k]);
        }
        g[P_INDEX] = cp * bce_logit_grad(y[P_INDEX], target.p);
        0.0
    };
    let trace = nn::forward_sequence(params, &inputs, &RecurrentState::zeros(params.hidden_dim()))?;
    let preds: Vec<StepVector> = trace.outputs.iter().map(|y| decode_output(y)).collect();
    let parts = sequence_loss(&preds, targets, w)?;
    if !parts.total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let output_grads: Vec<Vec<f64>> = trace
        .outputs
        .iter()
        .enumerate()
        .map(|(t, y)| {
            let mut g = vec![0.0; y.len()];
            loss(t, y, &mut g);
            g
        })
        .collect();
    let (grads, _) = nn::backward_trace(params, &trace, &output_grads)?;
    Ok((parts, grads))
}

/// Mean teacher-forced loss over a set of normalized episodes.
pub fn evaluate_loss(params: &LstmParams, episodes: &[Episode], w: LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        let inputs: Vec<[f64; STEP_DIM]> = ep.steps[..ep.len() - 1].iter().map(StepVector::to_array).collect();
        let trace = nn::forward_sequence(params, &inputs, &RecurrentState::zeros(params.hidden_dim()))?;
        let preds: Vec<StepVector> = trace.outputs.iter().map(|y| decode_output(y)).collect();
        total += sequence_loss(&preds, &ep.steps[1..], w)?.total;
    }
    Ok(total / episodes.len() as f64)
}

/// Trains on normalized episodes. Each epoch shuffles the episodes, splits
/// them into batches of `batch_size`, and applies one Adam step per batch
/// with the batch-mean gradient. The recorded loss for an epoch is the mean
/// episode loss seen during that epoch.
pub fn train(episodes: &[Episode], norm: Norm, config: &ModelConfig) -> Result<TrainedModel> {
    train_with_progress(episodes, norm, config, |_, _| {})
}

pub fn train_with_progress(
    episodes: &[Episode],
    norm: Norm,
    config: &ModelConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainedModel> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(ep) = episodes.iter().find(|e| e.len() < 2) {
        return Err(Error::EpisodeTooShort {
            episode: ep.meta.episode_id as usize,
            len: ep.len(),
        });
    }
    let mut model = TrainedModel::init(config, norm);
    let mut adam = AdamState::new(model.params.len(), config.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let w = config.alphas();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            // Per-episode results are collected in batch order and summed
            // sequentially, so the result does not depend on thread timing.
            let results: Vec<Result<(LossParts, LstmParams)>> = batch
                .par_iter()
                .map(|&i| episode_gradients(&model.params, &episodes[i], w))
                .collect();
            let mut grad = LstmParams::zeros(config.input_dim, config.hidden_dim, config.output_dim);
            for r in results {
                let (parts, g) = r?;
                epoch_loss += parts.total;
                grad.add_assign(&g);
            }
            grad.scale(1.0 / batch.len() as f64);
            adam.update(model.params.as_mut_slice(), grad.as_slice(), config.lr)?;
        }
        let mean = epoch_loss / episodes.len() as f64;
        model.loss_curve.push(mean);
        progress(epoch, mean);
    }
    if !model.params.is_finite() {
        return Err(Error::ModelCorrupt);
    }
    Ok(model)
}

const MAGIC: &[u8; 8] = b"MPLMODEL";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    gate_order: String,
    param_count: usize,
    norm: Norm,
    seed: u64,
    config: ModelConfig,
    loss_curve: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// Binary model container:
///
/// ```text
/// "MPLMODEL" | version u32 LE | header_len u32 LE | header JSON
///   | params f64 LE × param_count | SHA-256 of everything before
/// ```
pub fn model_to_bytes(model: &TrainedModel) -> Vec<u8> {
    let header = ModelHeader {
        input_dim: model.params.input_dim(),
        hidden_dim: model.params.hidden_dim(),
        output_dim: model.params.output_dim(),
        gate_order: "input,forget,cell,output".into(),
        param_count: model.params.len(),
        norm: model.norm,
        seed: model.config.seed,
        config: model.config.clone(),
        loss_curve: model.loss_curve.clone(),
        provenance: model.provenance.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + 8 * model.params.len() + CHECKSUM_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for w in model.params.as_slice() {
        out.extend_from_slice(&w.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < MAGIC.len() + 8 + CHECKSUM_LEN {
        return Err(Error::Checksum);
    }
    let (body, digest) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum);
    }
    if &body[..8] != MAGIC {
        return Err(Error::Shape("not a model file".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if body.len() < header_end {
        return Err(Error::Shape("header extends past end of file".into()));
    }
    let header: ModelHeader =
        serde_json::from_slice(&body[16..header_end]).map_err(|e| Error::Shape(format!("bad header: {e}")))?;
    if header.input_dim != STEP_DIM || header.output_dim != STEP_DIM {
        return Err(Error::Shape(format!(
            "model has input_dim {} / output_dim {}, expected {STEP_DIM}",
            header.input_dim, header.output_dim
        )));
    }
    let expected = LstmParams::param_count(header.input_dim, header.hidden_dim, header.output_dim);
    let blob = &body[header_end..];
    if header.param_count != expected || blob.len() != expected * 8 {
        return Err(Error::Shape(format!(
            "expected {expected} parameters, file holds {}",
            blob.len() / 8
        )));
    }
    let data: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = LstmParams::from_flat(header.input_dim, header.hidden_dim, header.output_dim, data)?;
    if !(header.norm.world_size > 0.0 && header.norm.max_speed > 0.0) {
        return Err(Error::Shape("normalization constants must be positive".into()));
    }
    Ok(TrainedModel {
        params,
        norm: header.norm,
        config: header.config,
        loss_curve: header.loss_curve,
        provenance: header.provenance,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

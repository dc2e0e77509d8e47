//! Episodes, datasets, the dataset file format and the preprocessing
//! operators applied before training.
//!
//! Dataset file: one JSON object per line. The first line is the header;
//! every following line is one step:
//!
//! ```text
//! {"format_version":1,"world_size":128.0,"max_speed":3.5,"dims":{"s":4,"u":2},...}
//! {"episode_id":0,"t":0,"s":[..4..],"u":[..2..],"p":0.0000000000000000e0}
//! ...
//! {"episode_id":0,"t":52,"s":[..],"u":[..],"p":..,"outcome":"reached_goal","seed":17,"source":"scripted"}
//! ```
//!
//! Step reals are written with 17 significant digits so a load/save cycle
//! reproduces the file byte for byte. Steps are stored in world units.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const S_DIM: usize = 4;
pub const U_DIM: usize = 2;
/// Width of a packed step: `s`, `u`, then `p`.
pub const STEP_DIM: usize = S_DIM + U_DIM + 1;

/// One timestep `(s, u, p)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepVector {
    pub s: [f64; S_DIM],
    pub u: [f64; U_DIM],
    pub p: f64,
}

impl StepVector {
    pub fn to_array(&self) -> [f64; STEP_DIM] {
        let mut x = [0.0; STEP_DIM];
        x[..S_DIM].copy_from_slice(&self.s);
        x[S_DIM..S_DIM + U_DIM].copy_from_slice(&self.u);
        x[STEP_DIM - 1] = self.p;
        x
    }

    pub fn from_slice(x: &[f64]) -> Result<Self> {
        if x.len() != STEP_DIM {
            return Err(Error::Dimension {
                context: "step vector",
                expected: STEP_DIM,
                actual: x.len(),
            });
        }
        Ok(Self {
            s: x[..S_DIM].try_into().unwrap(),
            u: x[S_DIM..S_DIM + U_DIM].try_into().unwrap(),
            p: x[STEP_DIM - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Scripted,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    ReachedGoal,
    Collided,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub episode_id: u64,
    /// Environment seed the episode was played with.
    pub seed: u64,
    pub source: Source,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub steps: Vec<StepVector>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub s: usize,
    pub u: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub world_size: f64,
    pub max_speed: f64,
    pub dims: Dims,
    pub env_config: EnvConfig,
    pub seed: u64,
    pub created_at: Option<String>,
    /// Effective run configuration that produced the file, if any.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

impl DatasetHeader {
    pub fn new(env_config: &EnvConfig, seed: u64) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            world_size: env_config.world_size,
            max_speed: env_config.agent_max_speed,
            dims: Dims { s: S_DIM, u: U_DIM },
            env_config: env_config.clone(),
            seed,
            created_at: None,
            config: None,
        }
    }

    pub fn norm(&self) -> Norm {
        Norm {
            world_size: self.world_size,
            max_speed: self.max_speed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    /// Fraction of all steps labelled as assisted (`p ≥ 0.5`).
    pub fn intervention_fraction(&self) -> f64 {
        let total: usize = self.episodes.iter().map(Episode::len).sum();
        if total == 0 {
            return 0.0;
        }
        let assisted = self
            .episodes
            .iter()
            .flat_map(|e| &e.steps)
            .filter(|s| s.p >= 0.5)
            .count();
        assisted as f64 / total as f64
    }
}

/// Scale constants between world units and the model's input space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub world_size: f64,
    pub max_speed: f64,
}

impl Norm {
    pub fn from_env(cfg: &EnvConfig) -> Self {
        Self {
            world_size: cfg.world_size,
            max_speed: cfg.agent_max_speed,
        }
    }

    pub fn step(&self, x: &StepVector) -> StepVector {
        StepVector {
            s: x.s.map(|v| v / self.world_size),
            u: x.u.map(|v| v / self.max_speed),
            p: x.p,
        }
    }

    pub fn unstep(&self, x: &StepVector) -> StepVector {
        StepVector {
            s: x.s.map(|v| v * self.world_size),
            u: x.u.map(|v| v * self.max_speed),
            p: x.p,
        }
    }
}

pub fn normalize(episode: &Episode, norm: &Norm) -> Episode {
    Episode {
        meta: episode.meta.clone(),
        steps: episode.steps.iter().map(|x| norm.step(x)).collect(),
    }
}

pub fn denormalize(episode: &Episode, norm: &Norm) -> Episode {
    Episode {
        meta: episode.meta.clone(),
        steps: episode.steps.iter().map(|x| norm.unstep(x)).collect(),
    }
}

/// `s·(1−p)` on the masked components; others pass through.
pub fn filter_assisted_state(s: &[f64], p: f64, mask: &[bool]) -> Result<Vec<f64>> {
    if s.len() != mask.len() {
        return Err(Error::Dimension {
            context: "filter mask",
            expected: s.len(),
            actual: mask.len(),
        });
    }
    Ok(s.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v * (1.0 - p) } else { v })
        .collect())
}

/// Causal moving average over the last `min(window, t+1)` frames.
pub fn smooth(series: &[Vec<f64>], window: usize) -> Result<Vec<Vec<f64>>> {
    if series.is_empty() {
        return Err(Error::Config("cannot smooth an empty series".into()));
    }
    if window == 0 {
        return Err(Error::Config("smoothing window must be at least 1".into()));
    }
    let dim = series[0].len();
    let mut out = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        let from = (t + 1).saturating_sub(window);
        let frames = &series[from..=t];
        let mut avg = vec![0.0; dim];
        for f in frames {
            if f.len() != dim {
                return Err(Error::Dimension {
                    context: "smooth series",
                    expected: dim,
                    actual: f.len(),
                });
            }
            for (a, v) in avg.iter_mut().zip(f) {
                *a += v;
            }
        }
        let n = frames.len() as f64;
        avg.iter_mut().for_each(|a| *a /= n);
        out.push(avg);
    }
    Ok(out)
}

/// Appends `copies` clones of every episode with `N(0, σ²)` noise on `u`.
/// Originals come first, then the clones grouped by source episode.
pub fn augment(episodes: &[Episode], sigma: f64, copies: usize, seed: u64) -> Result<Vec<Episode>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("augmentation sigma must be ≥ 0, got {sigma}")));
    }
    let mut out = episodes.to_vec();
    if copies == 0 {
        return Ok(out);
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ep in episodes {
        for _ in 0..copies {
            let mut clone = ep.clone();
            for step in clone.steps.iter_mut() {
                for u in step.u.iter_mut() {
                    *u += noise.sample(&mut rng);
                }
            }
            out.push(clone);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Causal moving-average window applied to `s`; 1 disables smoothing.
    pub smooth_window: usize,
    /// Components of `s` replaced by `s·(1−p)`.
    pub filter_mask: [bool; S_DIM],
    /// Std of the noise added to normalized `u`.
    pub augment_sigma: f64,
    pub augment_copies: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            smooth_window: 1,
            filter_mask: [false; S_DIM],
            augment_sigma: 0.02,
            augment_copies: 2,
        }
    }
}

/// Normalize, optionally smooth and filter, then augment: the episodes
/// handed to the trainer.
pub fn prepare_training_episodes(dataset: &Dataset, cfg: &PipelineConfig, seed: u64) -> Result<Vec<Episode>> {
    let norm = dataset.header.norm();
    let mut prepared = Vec::with_capacity(dataset.episodes.len());
    for ep in &dataset.episodes {
        let mut ep = normalize(ep, &norm);
        if cfg.smooth_window > 1 && !ep.is_empty() {
            let series: Vec<Vec<f64>> = ep.steps.iter().map(|x| x.s.to_vec()).collect();
            for (step, s) in ep.steps.iter_mut().zip(smooth(&series, cfg.smooth_window)?) {
                step.s.copy_from_slice(&s);
            }
        }
        if cfg.filter_mask.iter().any(|&m| m) {
            for step in ep.steps.iter_mut() {
                let s = filter_assisted_state(&step.s, step.p, &cfg.filter_mask)?;
                step.s.copy_from_slice(&s);
            }
        }
        prepared.push(ep);
    }
    augment(&prepared, cfg.augment_sigma, cfg.augment_copies, seed)
}

fn push_real(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").unwrap();
}

fn push_reals(out: &mut String, vs: &[f64]) {
    out.push('[');
    for (i, &v) in vs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_real(out, v);
    }
    out.push(']');
}

fn enum_tag<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("unit enum serializes")
}

/// Step lines for one episode, each terminated by `\n`.
pub fn episode_lines(ep: &Episode) -> String {
    let mut out = String::new();
    let last = ep.steps.len().saturating_sub(1);
    for (t, step) in ep.steps.iter().enumerate() {
        write!(out, "{{\"episode_id\":{},\"t\":{},\"s\":", ep.meta.episode_id, t).unwrap();
        push_reals(&mut out, &step.s);
        out.push_str(",\"u\":");
        push_reals(&mut out, &step.u);
        out.push_str(",\"p\":");
        push_real(&mut out, step.p);
        if t == last {
            write!(
                out,
                ",\"outcome\":{},\"seed\":{},\"source\":{}",
                enum_tag(&ep.meta.outcome),
                ep.meta.seed,
                enum_tag(&ep.meta.source)
            )
            .unwrap();
        }
        out.push_str("}\n");
    }
    out
}

pub fn header_line(header: &DatasetHeader) -> String {
    let mut line = serde_json::to_string(header).expect("header serializes");
    line.push('\n');
    line
}

pub fn to_string(dataset: &Dataset) -> String {
    let mut out = header_line(&dataset.header);
    for ep in &dataset.episodes {
        out.push_str(&episode_lines(ep));
    }
    out
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StepRecord {
    episode_id: u64,
    t: usize,
    s: [f64; S_DIM],
    u: [f64; U_DIM],
    p: f64,
    outcome: Option<Outcome>,
    seed: Option<u64>,
    source: Option<Source>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn from_str(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err(Error::EmptyDataset);
    };
    let probe: VersionProbe = serde_json::from_str(first).map_err(|e| Error::Malformed {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if probe.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let header: DatasetHeader = serde_json::from_str(first).map_err(|e| Error::Malformed {
        line: 1,
        msg: format!("bad header: {e}"),
    })?;
    if header.dims != (Dims { s: S_DIM, u: U_DIM }) {
        return Err(Error::Malformed {
            line: 1,
            msg: format!("unsupported dims s={} u={}", header.dims.s, header.dims.u),
        });
    }

    let mut episodes = Vec::new();
    let mut current: Option<(u64, Vec<StepVector>)> = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let rec: StepRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: lineno,
            msg: e.to_string(),
        })?;
        let malformed = |msg: String| Error::Malformed { line: lineno, msg };
        let (id, steps) = current.get_or_insert_with(|| (rec.episode_id, Vec::new()));
        if *id != rec.episode_id {
            return Err(malformed(format!(
                "episode {} starts before episode {} was closed",
                rec.episode_id, id
            )));
        }
        if rec.t != steps.len() {
            return Err(malformed(format!("expected t={}, found t={}", steps.len(), rec.t)));
        }
        steps.push(StepVector {
            s: rec.s,
            u: rec.u,
            p: rec.p,
        });
        if let Some(outcome) = rec.outcome {
            let (Some(seed), Some(source)) = (rec.seed, rec.source) else {
                return Err(malformed("final step must carry seed and source".into()));
            };
            let (episode_id, steps) = current.take().unwrap();
            episodes.push(Episode {
                meta: EpisodeMeta {
                    episode_id,
                    seed,
                    source,
                    outcome,
                },
                steps,
            });
        }
    }
    if let Some((id, _)) = current {
        return Err(Error::Malformed {
            line: text.lines().count(),
            msg: format!("episode {id} has no final step"),
        });
    }
    Ok(Dataset { header, episodes })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_string(dataset)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}

/// Appends one episode to an existing file, or creates the file with
/// `header` first.
pub fn append_episode(path: &Path, header: &DatasetHeader, episode: &Episode) -> Result<()> {
    let exists = path.exists() && fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut chunk = String::new();
    if !exists {
        chunk.push_str(&header_line(header));
    }
    chunk.push_str(&episode_lines(episode));
    file.write_all(chunk.as_bytes()).map_err(|e| Error::io(path, e))
}

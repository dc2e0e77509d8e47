//! Run configuration shared by every CLI subcommand.
//!
//! Every key is optional. Unknown keys are rejected. The top-level `seed`
//! drives every random stream (collection, init/shuffle, augmentation,
//! evaluation); per-section seeds are overwritten by [`RunConfig::effective`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PipelineConfig;
use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optimizer::OptConfig;
use crate::teacher::TeacherConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub episodes: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self { episodes: 150 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { episodes: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub port: u16,
    pub tick_hz: f64,
    /// Directory of static client files served at `/`.
    pub assets_dir: Option<PathBuf>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            port: 8765,
            tick_hz: 10.0,
            assets_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub teacher: TeacherConfig,
    pub collect: CollectConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub opt: OptConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl RunConfig {
    /// Parses TOML, or JSON when the path ends in `.json` (reports embed
    /// their configuration as JSON).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            // Accept either a bare config or a report that embeds one.
            let cfg = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(cfg).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Copies the top-level seed into every section and validates.
    pub fn effective(mut self) -> Result<Self> {
        self.env.seed = self.seed;
        self.teacher.seed = self.seed;
        self.model.seed = self.seed;
        self.env.validate()?;
        self.teacher.validate()?;
        self.model.validate()?;
        self.opt.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

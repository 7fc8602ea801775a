//! TOML configuration. Keys mirror the library structs:
//!
//! ```toml
//! [train]
//! lr_backbone = 2e-5
//! epochs = 8
//!
//! [encoder]
//! hidden_size = 32
//! # ...
//!
//! [gateway]
//! model = "gpt-4o-mini"
//! max_concurrency = 4
//!
//! [serve]
//! addr = "127.0.0.1:8080"
//! [[serve.models]]
//! id = "sa1"
//! rating = "runs/rating/model.json"
//! acceptance = "runs/acceptance/model.json"
//! ```
//!
//! Gateway settings are then overridden by `LLM_*` environment variables.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use capfuse::encoder::EncoderConfig;
use capfuse::experiment::PredictorConfig;
use capfuse::llm::GatewayConfig;
use capfuse::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
    pub rating: PathBuf,
    pub acceptance: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeConfig {
    pub addr: String,
    pub static_dir: Option<PathBuf>,
    /// Worker threads per recommendation request.
    pub fanout: usize,
    pub models: Vec<ModelEntry>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            static_dir: None,
            fanout: 4,
            models: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub train: TrainConfig,
    /// Defaults to the small encoder when absent.
    pub encoder: Option<EncoderConfig>,
    pub predictor: PredictorConfig,
    pub gateway: GatewayConfig,
    pub serve: ServeConfig,
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` if given, applies `--seed` and the environment.
    pub fn load(path: Option<&Path>, seed: Option<u64>, env: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.train.seeds = vec![s];
        }
        cfg.gateway = cfg.gateway.apply_env(env)?;
        cfg.gateway.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn encoder(&self) -> EncoderConfig {
        self.encoder.clone().unwrap_or_else(|| EncoderConfig::toy("capfuse"))
    }
}

//! Gateway configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::Context;
use peros_core::director::RecommendRules;
use peros_core::interpreter::LlmConfig;
use peros_core::lm::RetrainPolicy;
use peros_core::BackendConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Sessions, feeds, registry, lexicon store and reports live here.
    pub state_dir: PathBuf,
    /// Every session workspace must resolve inside this directory.
    pub sandbox_parent: PathBuf,
    pub listen: String,
    /// Backend used by sessions that do not pick their own.
    pub backend: BackendConfig,
    pub recommend: RecommendRules,
    pub retrain: RetrainPolicy,
    /// Watchdog polling period.
    pub poll_ms: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            state_dir: PathBuf::from(".peros-gateway"),
            sandbox_parent: PathBuf::from("."),
            listen: "127.0.0.1:7878".into(),
            backend: BackendConfig::default(),
            recommend: RecommendRules::default(),
            retrain: RetrainPolicy::default(),
            poll_ms: 200,
        }
    }
}

impl Config {
    /// Reads `path` when given. Relative directories resolve against the
    /// file's own directory. Without a file, an LLM endpoint set through the
    /// environment becomes the default backend.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            let mut cfg = Config::default();
            if let Some(llm) = LlmConfig::from_env() {
                cfg.backend = BackendConfig::LlmEndpoint(llm);
            }
            return Ok(cfg);
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for dir in [&mut cfg.state_dir, &mut cfg.sandbox_parent] {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn sessions_dir(&self) -> PathBuf {
        self.state_dir.join("sessions")
    }

    pub fn lexicon_dir(&self) -> PathBuf {
        self.state_dir.join("lexicon")
    }

    pub fn registry_path(&self) -> PathBuf {
        self.state_dir.join("registry.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.state_dir.join("reports")
    }
}

//! Settings file. Command line flags win over environment variables, which
//! win over this file, which wins over built-in defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use intentloop_core::bandit::{ContextScheme, PolicyKind};
use intentloop_core::simulator::SimConfig;
use intentloop_core::{Error, Result};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub policy: Option<String>,
    pub scheme: Option<String>,
    pub ontology: Option<PathBuf>,
    pub port: Option<u16>,
    pub data_dir: Option<PathBuf>,
    pub cors_origins: Option<Vec<String>>,
    pub examples: Option<PathBuf>,
    pub search_endpoint: Option<String>,
    pub search_key: Option<String>,
    pub search_fixture: Option<PathBuf>,
    pub lm_endpoint: Option<String>,
    pub embedding_endpoint: Option<String>,
    pub embedding_dim: Option<usize>,
    pub predictor: Option<PathBuf>,
    pub max_steps: Option<u32>,
    pub slate_size: Option<usize>,
    pub cap: Option<f64>,
    /// Simulator settings by name, applied before `--set` overrides.
    pub simulation: BTreeMap<String, serde_json::Value>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn apply_simulation(&self, sim: &mut SimConfig) -> Result<()> {
        for (key, value) in &self.simulation {
            let text = match value {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            sim.set(key, &text)?;
        }
        Ok(())
    }
}

pub fn parse_policy(name: &str) -> Result<PolicyKind> {
    PolicyKind::parse(name).ok_or_else(|| {
        let known: Vec<&str> = PolicyKind::ALL.iter().map(|k| k.name()).collect();
        Error::Validation(format!("unknown policy {name:?}; expected one of {}", known.join(", ")))
    })
}

pub fn parse_scheme(name: &str) -> Result<ContextScheme> {
    ContextScheme::parse(name)
        .ok_or_else(|| Error::Validation(format!("unknown context scheme {name:?}; expected method1, method2 or method3")))
}

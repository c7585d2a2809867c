//! Config files for the CLI and the service, in TOML or JSON.

use std::fs;
use std::path::{Path, PathBuf};

use refinpaint_core::engine::EngineConfig;
use refinpaint_core::eval::{CompareConfig, SweepConfig};
use refinpaint_core::models::ModelConfig;
use refinpaint_core::train::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

/// Parses by extension: `.toml` as TOML, anything else as JSON.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|message| ConfigError::Parse {
        path: path.to_path_buf(),
        message,
    })
}

/// Resolves a path from a config file against the file's directory.
pub fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checkpoints {
    pub inpainter: Option<PathBuf>,
    pub feedback: Option<PathBuf>,
    pub evaluator: Option<PathBuf>,
}

impl Checkpoints {
    pub fn resolved(&self, config_path: &Path) -> Checkpoints {
        let r = |p: &Option<PathBuf>| p.as_ref().map(|p| resolve(config_path, p));
        Checkpoints {
            inpainter: r(&self.inpainter),
            feedback: r(&self.feedback),
            evaluator: r(&self.evaluator),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineSection {
    #[serde(rename = "T", alias = "iterations")]
    pub iterations: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for EngineSection {
    fn default() -> Self {
        let e = EngineConfig::default();
        Self {
            iterations: e.iterations,
            temperature: e.temperature,
            top_p: e.top_p,
            seed: e.seed,
        }
    }
}

impl EngineSection {
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            iterations: self.iterations,
            temperature: self.temperature,
            top_p: self.top_p,
            seed: self.seed,
            ..EngineConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub port: u16,
    pub state_dir: PathBuf,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            port: 8080,
            state_dir: PathBuf::from("state"),
        }
    }
}

/// `{checkpoints, engine, server}`, shared by `run` and `serve`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoints: Checkpoints,
    pub engine: EngineSection,
    pub server: ServerSection,
}

/// Where training and evaluation data come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    /// Number of generated toy pieces; used when `dir` is absent.
    pub toy: usize,
    /// Directory of MIDI files, split by content hash.
    pub dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            toy: 2000,
            dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub corpus: CorpusSpec,
    /// Defaults to the desk configuration of the trained model kind.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    /// Frozen inpainter, required for feedback training.
    pub inpainter: Option<PathBuf>,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
    /// Final checkpoint path.
    pub out: PathBuf,
}

impl Default for TrainFile {
    fn default() -> Self {
        Self {
            corpus: CorpusSpec::default(),
            model: None,
            train: TrainConfig::default(),
            inpainter: None,
            init_seed: 0,
            out: PathBuf::from("model.ckpt"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFile {
    pub corpus: CorpusSpec,
    pub checkpoints: Checkpoints,
    pub sweep: SweepConfig,
    pub compare: CompareConfig,
    /// Report JSON path; the rendered table always goes to stdout.
    pub out: Option<PathBuf>,
}

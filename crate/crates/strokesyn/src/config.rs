//! Run configuration: one TOML document, then environment overrides, then
//! command-line overrides (later sources win).
//!
//! Overrides name a dotted path (`train.steps=500`). Environment variables
//! use the [`ENV_PREFIX`] and a double underscore between path parts:
//! `STROKESYN_TRAIN__BATCH_SIZE=16`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use strokesyn_core::evaluation::Protocol;
use strokesyn_core::segmentation::SegmentationPolicy;
use strokesyn_core::synthesis::SynthesisConfig;
use strokesyn_core::training::TrainConfig;
use strokesyn_core::vae::ModelConfig;
use thiserror::Error;
use toml::{Table, Value};

use crate::checkpoint::RegistryEntry;
use crate::io::{ColumnMap, Format};

pub const ENV_PREFIX: &str = "STROKESYN_";

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("{0}")]
    Parse(String),
    #[error("override {0:?} is not of the form key.path=value")]
    Override(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("path does not exist: {0}")]
    MissingPath(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub input: Option<PathBuf>,
    /// Guessed from the file extension when absent.
    pub format: Option<Format>,
    pub columns: ColumnMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Synthetic enrolment sizes to evaluate, one report each.
    pub k_synth: Vec<usize>,
    pub protocol: Protocol,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { k_synth: vec![0], protocol: Protocol::default() }
    }
}

/// Everything one invocation needs. The top-level `seed` is the only seed:
/// it is copied into training, synthesis and the trial protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub segmentation: SegmentationPolicy,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Synthesis settings; its policy comes from `segmentation`.
    pub synthesis: SynthesisConfig,
    pub evaluation: EvaluationConfig,
    /// Checkpoints forming the model registry.
    pub models: Vec<RegistryEntry>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            segmentation: SegmentationPolicy::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            synthesis: SynthesisConfig::default(),
            evaluation: EvaluationConfig::default(),
            models: Vec::new(),
        }
    }
}

/// Keys that would be silently overwritten, so setting them is an error.
const DERIVED_KEYS: [&str; 4] = ["train.seed", "synthesis.seed", "synthesis.policy", "evaluation.protocol.seed"];

/// Parses an override value as TOML, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in `table`, creating intermediate tables.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(path.to_string()));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let slot = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match slot {
            Value::Table(t) => t,
            _ => return Err(ConfigError::Invalid { key: path.to_string(), message: format!("{part} is not a section") }),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn has_path(table: &Table, path: &str) -> bool {
    let mut cur = table;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        match cur.get(*part) {
            None => return false,
            Some(_) if i + 1 == parts.len() => return true,
            Some(Value::Table(t)) => cur = t,
            Some(_) => return false,
        }
    }
    false
}

/// Builds the layered document and resolves it into a [`RunConfig`].
#[derive(Debug, Clone, Default)]
pub struct ConfigLoader {
    doc: Table,
}

/// Relative paths in a config file are relative to the file, not the cwd.
fn rebase_paths(doc: &mut Table, base: &Path) {
    let fix = |v: &mut Value| {
        if let Value::String(s) = v {
            if Path::new(s.as_str()).is_relative() {
                *s = base.join(s.as_str()).display().to_string();
            }
        }
    };
    if let Some(v) = doc.get_mut("out_dir") {
        fix(v);
    }
    if let Some(v) = doc.get_mut("data").and_then(|d| d.get_mut("input")) {
        fix(v);
    }
    if let Some(Value::Array(models)) = doc.get_mut("models") {
        for m in models {
            if let Some(v) = m.get_mut("path") {
                fix(v);
            }
        }
    }
}

impl ConfigLoader {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn file(mut self, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), message: e.to_string() })?;
        self.doc = text.parse::<Table>().map_err(|e| ConfigError::Parse(format!("{}: {}", path.display(), e.message())))?;
        if let Some(base) = path.parent() {
            rebase_paths(&mut self.doc, base);
        }
        Ok(self)
    }

    pub fn text(mut self, text: &str) -> Result<Self, ConfigError> {
        self.doc = text.parse::<Table>().map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        Ok(self)
    }

    /// Applies every `STROKESYN_*` variable from `vars`.
    pub fn env<I, K, V>(mut self, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut found: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.as_ref().strip_prefix(ENV_PREFIX)?;
                Some((rest.to_ascii_lowercase().replace("__", "."), v.as_ref().to_string()))
            })
            .collect();
        found.sort();
        for (path, raw) in found {
            set_path(&mut self.doc, &path, parse_value(&raw))?;
        }
        Ok(self)
    }

    /// Applies one `key.path=value` override.
    pub fn set(mut self, assignment: &str) -> Result<Self, ConfigError> {
        let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
        set_path(&mut self.doc, key.trim(), parse_value(raw.trim()))?;
        Ok(self)
    }

    pub fn set_value(mut self, key: &str, value: Value) -> Result<Self, ConfigError> {
        set_path(&mut self.doc, key, value)?;
        Ok(self)
    }

    pub fn finish(self) -> Result<RunConfig, ConfigError> {
        for key in DERIVED_KEYS {
            if has_path(&self.doc, key) {
                let message = if key.ends_with("policy") { "set [segmentation] instead" } else { "set the top-level seed instead" };
                return Err(ConfigError::Invalid { key: key.to_string(), message: message.to_string() });
            }
        }
        let mut cfg: RunConfig = Value::Table(self.doc).try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        cfg.propagate();
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    fn propagate(&mut self) {
        self.train.seed = self.seed;
        self.synthesis.seed = self.seed;
        self.synthesis.policy = self.segmentation;
        self.evaluation.protocol.seed = self.seed;
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key: &str, e: &dyn std::fmt::Display| ConfigError::Invalid { key: key.to_string(), message: e.to_string() };
        self.model.validate().map_err(|e| invalid("model", &e))?;
        self.train.validate().map_err(|e| invalid("train", &e))?;
        self.synthesis.validate().map_err(|e| invalid("synthesis", &e))?;
        if self.segmentation.mode == strokesyn_core::segmentation::SegmentationMode::Velocity {
            self.segmentation.validate().map_err(|e| invalid("segmentation", &e))?;
        }
        if self.evaluation.k_synth.is_empty() {
            return Err(invalid("evaluation.k_synth", &"needs at least one value"));
        }
        Ok(())
    }

    /// TOML text that reloads to this config.
    pub fn to_toml(&self) -> String {
        let mut snapshot = Value::try_from(self).expect("config serializes");
        if let Value::Table(t) = &mut snapshot {
            for key in DERIVED_KEYS {
                remove_path(t, key);
            }
        }
        toml::to_string(&snapshot).expect("config serializes")
    }
}

fn remove_path(table: &mut Table, path: &str) {
    match path.split_once('.') {
        None => {
            table.remove(path);
        }
        Some((head, rest)) => {
            if let Some(Value::Table(t)) = table.get_mut(head) {
                remove_path(t, rest);
            }
        }
    }
}

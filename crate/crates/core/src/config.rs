//! Run configuration: JSON file merged over defaults, then dotted-key overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Phase;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthetic::SyntheticSpec;
use crate::train::TrainConfig;

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "MEDVQA_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub captions: Option<PathBuf>,
    pub vqa_train: Option<PathBuf>,
    pub vqa_test: Option<PathBuf>,
    /// Fixed vocabulary file; built from the training text when absent.
    pub vocab: Option<PathBuf>,
    pub vocab_min_count: usize,
    /// `word v1 … vd` text file for initializing the word table.
    pub word_vectors: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generation cap; `None` uses the model's answer length.
    pub max_answer_len: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `vocab_size` 0 means "take it from the vocabulary".
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale defaults for a phase: the small model and a few thousand steps.
    pub fn desk(phase: Phase) -> Self {
        let train = TrainConfig { steps: 2000, ..TrainConfig::for_phase(phase) };
        Self { model: ModelConfig::desk(0), train, data: DataConfig::default(), synthetic: SyntheticSpec::default(), eval: EvalConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.synthetic.validate()?;
        let m = ModelConfig { vocab_size: self.model.vocab_size.max(7), ..self.model.clone() };
        m.validate()?;
        if self.eval.max_answer_len == Some(0) {
            return Err(Error::Invalid("eval.max_answer_len must be positive".into()));
        }
        Ok(())
    }
}

/// Recursively overlay `patch` onto `base`. Objects merge key by key; anything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Whether `key` (dotted) names a leaf or sub-tree of `tree`.
pub fn has_key(tree: &Value, key: &str) -> bool {
    key.split('.').try_fold(tree, |node, part| node.get(part)).is_some()
}

/// Parse a flag value as JSON, falling back to a plain string.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn set_key(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node.get_mut(*part).ok_or_else(|| Error::Invalid(format!("unknown config key `{key}`")))?;
    }
    let last = parts[parts.len() - 1];
    match node.as_object_mut() {
        Some(obj) if obj.contains_key(last) => {
            obj.insert(last.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Invalid(format!("unknown config key `{key}`"))),
    }
}

/// Defaults ← file ← overrides, then validated.
pub fn resolve(phase: Phase, file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
    let mut tree = serde_json::to_value(RunConfig::desk(phase))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.into(), line: e.line(), msg: e.to_string() })?;
        merge(&mut tree, patch);
    }
    for (k, v) in overrides {
        set_key(&mut tree, k, v.clone())?;
    }
    let cfg: RunConfig = serde_json::from_value(tree)?;
    cfg.validate()?;
    Ok(cfg)
}

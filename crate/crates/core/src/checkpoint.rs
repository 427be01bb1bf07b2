//! Checkpoint directories: `manifest.json`, one MVQT file per parameter, the vocabulary, and
//! optionally the optimizer moments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Parts};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamKind, ParamSet};
use crate::tensor_file;
use crate::text::Vocabulary;

pub const MANIFEST: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerEntry {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub phase: Phase,
    pub step: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub parts: Parts,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerEntry>,
}

/// Parameters plus everything needed to rebuild the model that owns them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub phase: Phase,
    pub step: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub parts: Parts,
    pub params: ParamSet<f32>,
    pub vocab: Vocabulary,
    pub optimizer: Option<Adam<f32>>,
}

/// Hex SHA-256 of the value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn tensor_file_name(name: &str) -> String {
    format!("tensors/{name}.mvqt")
}

fn moment_file_name(name: &str, which: &str) -> String {
    format!("optimizer/{name}.{which}.mvqt")
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-') && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid(format!("parameter name `{name}` is not usable as a file name")))
    }
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            phase: self.phase,
            step: self.step,
            config_hash: self.config_hash.clone(),
            model: self.model.clone(),
            parts: self.parts,
            tensors: self
                .params
                .iter()
                .map(|(_, p)| TensorEntry { name: p.name.clone(), kind: p.kind, shape: [p.value.nrows(), p.value.ncols()], file: tensor_file_name(&p.name) })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry { step: o.step, config: o.config }),
        }
    }

    /// Write into `dir`, creating it. Existing files with the same names are replaced.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["tensors", "optimizer"] {
            let p = dir.join(sub);
            if sub == "tensors" || self.optimizer.is_some() {
                fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let manifest = self.manifest();
        for ((_, p), entry) in self.params.iter().zip(&manifest.tensors) {
            check_name(&p.name)?;
            tensor_file::write_matrix(&dir.join(&entry.file), &p.value)?;
        }
        if let Some(opt) = &self.optimizer {
            for (i, (_, p)) in self.params.iter().enumerate() {
                tensor_file::write_matrix(&dir.join(moment_file_name(&p.name, "m")), &opt.m[i])?;
                tensor_file::write_matrix(&dir.join(moment_file_name(&p.name, "v")), &opt.v[i])?;
            }
        }
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let mut json = serde_json::to_string_pretty(&manifest)?;
        json.push('\n');
        let path = dir.join(MANIFEST);
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.clone(), line: e.line(), msg: e.to_string() })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!("unsupported checkpoint format version {}", manifest.format_version)));
        }
        let mut params = ParamSet::new();
        for t in &manifest.tensors {
            check_name(&t.name)?;
            let file = dir.join(&t.file);
            if !file.starts_with(dir) || t.file.contains("..") {
                return Err(Error::Invalid(format!("tensor `{}` points outside the checkpoint", t.name)));
            }
            let value = tensor_file::read_matrix(&file).map_err(|e| Error::Invalid(format!("tensor `{}`: {e}", t.name)))?;
            if value.dim() != (t.shape[0], t.shape[1]) {
                return Err(Error::Shape(format!("tensor `{}` has shape {:?}, manifest says {:?}", t.name, value.dim(), t.shape)));
            }
            params.insert(&t.name, t.kind, value)?;
        }
        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let mut adam = Adam::new(o.config, &params);
                adam.step = o.step;
                for (i, t) in manifest.tensors.iter().enumerate() {
                    for (which, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                        let value = tensor_file::read_matrix(&dir.join(moment_file_name(&t.name, which)))?;
                        if value.dim() != slot.dim() {
                            return Err(Error::Shape(format!("optimizer moment {which} of `{}` has shape {:?}", t.name, value.dim())));
                        }
                        *slot = value;
                    }
                }
                Some(adam)
            }
        };
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        if vocab.len() != manifest.model.vocab_size {
            return Err(Error::Invalid(format!("vocabulary has {} entries, model expects {}", vocab.len(), manifest.model.vocab_size)));
        }
        Ok(Self {
            phase: manifest.phase,
            step: manifest.step,
            config_hash: manifest.config_hash,
            model: manifest.model,
            parts: manifest.parts,
            params,
            vocab,
            optimizer,
        })
    }
}

/// Directory for a periodic checkpoint under `root`.
pub fn step_dir(root: &Path, step: u64) -> PathBuf {
    root.join(format!("step-{step:08}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VqaModel;

    fn sample(with_opt: bool) -> Checkpoint {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"].map(String::from)).unwrap();
        let cfg = ModelConfig::desk(vocab.len());
        let (_, params) = VqaModel::init::<f32>(&cfg, Parts::PRETRAIN, 3).unwrap();
        let optimizer = with_opt.then(|| {
            let mut a = Adam::new(AdamConfig::default(), &params);
            a.step = 7;
            a.m[0].fill(0.25);
            a
        });
        Checkpoint { phase: Phase::Pretrain, step: 7, config_hash: config_hash(&cfg).unwrap(), model: cfg, parts: Parts::PRETRAIN, params, vocab, optimizer }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample(true);
        ck.save(dir.path()).unwrap();
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back.manifest(), ck.manifest());
        for ((_, a), (_, b)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |m: &ndarray::Array2<f32>| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.vocab.tokens(), ck.vocab.tokens());
    }

    #[test]
    fn missing_tensor_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample(false);
        ck.save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("tensors/encoder.pos.mvqt")).unwrap();
        let err = Checkpoint::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("encoder.pos"), "{err}");
    }

    #[test]
    fn corrupt_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        sample(false).save(dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());
    }

    #[test]
    fn hash_tracks_config() {
        let a = ModelConfig::desk(10);
        let b = ModelConfig { model_dim: 32, ..a.clone() };
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }
}

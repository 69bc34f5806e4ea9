use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{Task, TaskSpec};
use crate::error::{Error, Result};
use crate::model::{DecoderVariant, ModelConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Where `gen-data` writes and the other commands read `.src`/`.tgt` files.
    pub data_dir: PathBuf,
    /// Checkpoints, CSVs, decoded text and manifests.
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { data_dir: "data".into(), out_dir: "runs".into() }
    }
}

/// Everything a run needs. Loaded as defaults, then the `--config` file,
/// then `--set` overrides, then subcommand flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new(32, 4, 3, 1, 16, DecoderVariant::Compressed).with_seed(7),
            train: TrainConfig { epochs: 20, ..TrainConfig::default() },
            task: TaskSpec {
                task: Task::Reverse,
                vocab: 16,
                min_len: 1,
                max_len: 12,
                n_train: 3000,
                n_valid: 200,
                n_test: 200,
                seed: 1,
            },
            paths: Paths::default(),
        }
    }
}

/// Recursively overlays `patch` on `base`; objects merge key by key, any
/// other value replaces.
fn merge(base: &mut Value, patch: Value) {
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

/// Applies one `a.b.c=value` override. The value is parsed as JSON when it
/// can be and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = slot else {
            return Err(Error::Config(format!("override `{key}`: `{}` is not a section", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        slot = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("override `{assignment}` has an empty key")))
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let patch: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(Error::Config(format!("{}: top level must be an object", path.display())));
            }
            merge(&mut doc, patch);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.task.validate()?;
        if self.model.vocab_src < self.task.vocab || self.model.vocab_tgt < self.task.vocab {
            return Err(Error::Config(format!(
                "model vocabularies {}/{} are smaller than the task vocabulary {}",
                self.model.vocab_src, self.model.vocab_tgt, self.task.vocab
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"model": {"d_model": 16}, "train": {"epochs": 3}}"#).unwrap();
        let cfg = RunConfig::resolve(Some(&path), &["train.epochs=5".into(), "paths.out_dir=out".into()]).unwrap();
        assert_eq!(cfg.model.d_model, 16);
        assert_eq!(cfg.model.n_heads, 4);
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.paths.out_dir, PathBuf::from("out"));
        assert!(matches!(RunConfig::resolve(None, &["model.bogus=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, &["model.d_model=30".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, &["epochs".into()]), Err(Error::Config(_))));
        std::fs::write(&path, r#"{"extra": {}}"#).unwrap();
        assert!(matches!(RunConfig::resolve(Some(&path), &[]), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}

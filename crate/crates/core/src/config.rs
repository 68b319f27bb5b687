//! Run configuration: a JSON document with `data`, `vocab`, `model`, `train`
//! and `searnn` sections plus `output_dir` and `seed`. Every field except the
//! data paths and `output_dir` has a default, and unknown keys are rejected
//! with their full path.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{ModelDims, DEFAULT_EMBED_DIM, DEFAULT_HIDDEN_DIM};
use crate::optim::DEFAULT_LR;
use crate::searnn::SearnnConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mle,
    Searnn,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Mle => "mle",
            Objective::Searnn => "searnn",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mle" => Ok(Objective::Mle),
            "searnn" => Ok(Objective::Searnn),
            _ => Err(Error::config(
                "train.objective",
                format!("unknown objective `{s}`; allowed: mle, searnn"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub dev_src: PathBuf,
    pub dev_tgt: PathBuf,
    #[serde(default)]
    pub test_src: Option<PathBuf>,
    #[serde(default)]
    pub test_tgt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Maximum entries including the four specials.
    pub src_size: usize,
    pub tgt_size: usize,
    pub min_freq: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            src_size: 30_000,
            tgt_size: 30_000,
            min_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: DEFAULT_EMBED_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub anneal_factor: f64,
    pub anneal_patience: usize,
    pub clip_norm: f64,
    /// Cap on greedy output length during evaluation.
    pub max_decode_len: usize,
    /// Number of leading training pairs decoded for the train BLEU record.
    pub train_eval_size: usize,
    /// Write elapsed seconds into the metrics log. Off by default so the log
    /// is a pure function of the configuration.
    pub record_wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Mle,
            lr: DEFAULT_LR,
            max_steps: 25_000,
            batch_size: 32,
            eval_every: 500,
            anneal_factor: 0.5,
            anneal_patience: 3,
            clip_norm: 5.0,
            max_decode_len: 100,
            train_eval_size: 500,
            record_wall_clock: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub vocab: VocabConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub searnn: SearnnConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Deserializes and validates, reporting the failing key path.
    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::config(path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config(".", format!("malformed JSON: {e}")))?;
        Self::from_value(value)
    }

    /// Reads a config file, applies `key.path=value` overrides and resolves
    /// relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), format!("malformed JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let d = &mut self.data;
        for p in [&mut d.train_src, &mut d.train_tgt, &mut d.dev_src, &mut d.dev_tgt] {
            fix(p);
        }
        for p in [&mut d.test_src, &mut d.test_tgt].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        let positive = |ok: bool, path: &str, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(path, what.to_string()))
            }
        };
        positive(t.lr > 0.0 && t.lr.is_finite(), "train.lr", "must be positive")?;
        positive(t.max_steps >= 1, "train.max_steps", "must be at least 1")?;
        positive(t.batch_size >= 1, "train.batch_size", "must be at least 1")?;
        positive(t.eval_every >= 1, "train.eval_every", "must be at least 1")?;
        positive(
            t.anneal_factor > 0.0 && t.anneal_factor < 1.0,
            "train.anneal_factor",
            "must lie in (0, 1)",
        )?;
        positive(t.clip_norm > 0.0, "train.clip_norm", "must be positive")?;
        positive(t.max_decode_len >= 1, "train.max_decode_len", "must be at least 1")?;
        positive(self.model.embed_dim >= 1, "model.embed_dim", "must be at least 1")?;
        positive(self.model.hidden_dim >= 1, "model.hidden_dim", "must be at least 1")?;
        positive(self.vocab.src_size >= 5, "vocab.src_size", "must be at least 5")?;
        positive(self.vocab.tgt_size >= 5, "vocab.tgt_size", "must be at least 5")?;
        positive(self.vocab.min_freq >= 1, "vocab.min_freq", "must be at least 1")?;
        if self.data.test_src.is_some() != self.data.test_tgt.is_some() {
            return Err(Error::config(
                "data.test_src",
                "test_src and test_tgt must be given together",
            ));
        }
        self.searnn.validate()
    }

    /// Checks that every referenced input file exists.
    pub fn check_files(&self) -> Result<()> {
        let d = &self.data;
        let mut files = vec![
            ("data.train_src", &d.train_src),
            ("data.train_tgt", &d.train_tgt),
            ("data.dev_src", &d.dev_src),
            ("data.dev_tgt", &d.dev_tgt),
        ];
        if let (Some(s), Some(t)) = (&d.test_src, &d.test_tgt) {
            files.push(("data.test_src", s));
            files.push(("data.test_tgt", t));
        }
        for (key, p) in files {
            if !p.is_file() {
                return Err(Error::config(key, format!("file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn model_dims(&self, src_vocab: usize, tgt_vocab: usize) -> ModelDims {
        ModelDims {
            src_vocab,
            tgt_vocab,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Sets `a.b.c=value` inside a JSON object. The value is parsed as JSON when
/// possible and taken as a plain string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(assignment, "override must look like key.path=value"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::config(key, "empty key"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyKind;
    use crate::searnn::{LossKind, Sampling};
    use serde_json::json;

    fn minimal() -> Value {
        json!({
            "data": {"train_src": "a", "train_tgt": "b", "dev_src": "c", "dev_tgt": "d"},
            "output_dir": "runs/x"
        })
    }

    #[test]
    fn defaults_are_materialized() {
        let cfg = RunConfig::from_value(minimal()).unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.max_steps, 25_000);
        assert_eq!(cfg.train.anneal_factor, 0.5);
        assert_eq!(cfg.train.anneal_patience, 3);
        assert_eq!(cfg.train.clip_norm, 5.0);
        assert_eq!(cfg.model.hidden_dim, 256);
        assert_eq!(cfg.searnn.rollin, PolicyKind::Reference);
        assert_eq!(cfg.searnn.rollout, PolicyKind::Mixed(0.5));
        assert_eq!(cfg.searnn.loss, LossKind::Kl);
        assert_eq!(cfg.searnn.alpha, 1.0);
        assert_eq!(
            cfg.searnn.sampling,
            Sampling::Sampled {
                top_k: 15,
                neighbors: 10
            }
        );
        let text = cfg.to_json_pretty();
        let back = RunConfig::from_json_str(&text).unwrap();
        assert_eq!(back, cfg);
        for key in ["\"lr\"", "\"anneal_factor\"", "\"clip_norm\"", "\"rollout\"", "\"sampling\""] {
            assert!(text.contains(key), "{key} missing from resolved config");
        }
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let mut v = minimal();
        v["train"] = json!({"learning_rate": 0.1});
        let err = RunConfig::from_value(v).unwrap_err();
        match err {
            Error::Config { path, message } => {
                assert_eq!(path, "train.learning_rate");
                assert!(message.contains("unknown field"), "{message}");
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_policy_lists_allowed_values() {
        let mut v = minimal();
        v["searnn"] = json!({"rollin": "oracle"});
        let err = RunConfig::from_value(v).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("searnn.rollin"), "{text}");
        assert!(text.contains("reference") && text.contains("learned") && text.contains("mixed"), "{text}");
    }

    #[test]
    fn range_violations_are_config_errors() {
        for (section, body, path) in [
            ("train", json!({"lr": 0.0}), "train.lr"),
            ("train", json!({"max_steps": 0}), "train.max_steps"),
            ("train", json!({"anneal_factor": 1.0}), "train.anneal_factor"),
            ("searnn", json!({"alpha": -1.0}), "searnn.alpha"),
        ] {
            let mut v = minimal();
            v[section] = body;
            match RunConfig::from_value(v).unwrap_err() {
                Error::Config { path: p, .. } => assert_eq!(p, path),
                e => panic!("{e}"),
            }
        }
    }

    #[test]
    fn overrides_parse_json_or_string() {
        let mut v = minimal();
        apply_override(&mut v, "train.lr=0.01").unwrap();
        apply_override(&mut v, "searnn.rollout=learned").unwrap();
        apply_override(&mut v, "train.objective=\"searnn\"").unwrap();
        let cfg = RunConfig::from_value(v).unwrap();
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.searnn.rollout, PolicyKind::Learned);
        assert_eq!(cfg.train.objective, Objective::Searnn);
        assert!(apply_override(&mut minimal(), "no_equals").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, minimal().to_string()).unwrap();
        let cfg = RunConfig::load(&path, &[]).unwrap();
        assert_eq!(cfg.data.train_src, dir.path().join("a"));
        assert_eq!(cfg.output_dir, dir.path().join("runs/x"));
        let err = cfg.check_files().unwrap_err();
        assert!(err.to_string().contains("data.train_src"));
    }
}

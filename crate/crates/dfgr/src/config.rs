//! Plain-text `key=value` run configuration with section prefixes
//! (`gen.*`, `train.*`, `cost.*`, `score.*`), command-line overrides, and a
//! closed schema: unknown keys are rejected.

use crate::datagen::GeneratorSpec;
use crate::flops::{CostModel, FlopsError};
use crate::trainer::{Paradigm, TrainConfig};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {key:?}; run with --help-config for the schema")]
    UnknownKey { key: String },
    #[error("config key {key}: {message}")]
    BadValue { key: String, message: String },
    #[error(transparent)]
    Cost(#[from] FlopsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Uint,
    Int,
    Float,
    Bool,
    Paradigm,
    UintList,
}

/// `(key, default, kind, help)` — the entire accepted vocabulary.
const SCHEMA: &[(&str, &str, Kind, &str)] = &[
    ("gen.users", "700", Kind::Uint, "users to generate"),
    ("gen.items", "400", Kind::Uint, "item vocabulary size"),
    (
        "gen.sessions_per_user",
        "9.0",
        Kind::Float,
        "mean sessions per user",
    ),
    (
        "gen.session_len",
        "9.0",
        Kind::Float,
        "mean interactions per session",
    ),
    (
        "gen.latent_dim",
        "4",
        Kind::Uint,
        "latent interest dimension",
    ),
    (
        "gen.drift",
        "0.15",
        Kind::Float,
        "interest drift per session",
    ),
    (
        "gen.affinity",
        "0.6",
        Kind::Float,
        "user-item affinity weight",
    ),
    (
        "gen.item_bias",
        "1.6",
        Kind::Float,
        "per-item quality weight",
    ),
    ("gen.recency", "0.15", Kind::Float, "recency weight"),
    (
        "gen.base_logit",
        "-0.2",
        Kind::Float,
        "click-model intercept",
    ),
    ("gen.categories", "12", Kind::Uint, "item category count"),
    ("gen.segments", "6", Kind::Uint, "user segment count"),
    ("gen.seed", "20250601", Kind::Uint, "generator seed"),
    (
        "train.paradigm",
        "DFGR",
        Kind::Paradigm,
        "METAGR | SFGR | DFGR",
    ),
    ("train.batch", "8", Kind::Uint, "sequences per step"),
    ("train.steps", "1000", Kind::Uint, "optimizer steps"),
    (
        "train.base_lr",
        "5e-4",
        Kind::Float,
        "constant-phase learning rate",
    ),
    (
        "train.decay_per_1k",
        "5e-6",
        Kind::Float,
        "decay per 1000 steps",
    ),
    (
        "train.decay_start",
        "-1",
        Kind::Int,
        "first decay step; negative = constant",
    ),
    ("train.seed", "7", Kind::Uint, "training seed"),
    ("train.d_model", "16", Kind::Uint, "model width D"),
    ("train.heads", "2", Kind::Uint, "attention heads H"),
    ("train.layers", "2", Kind::Uint, "encoder depth L"),
    ("train.residual", "true", Kind::Bool, "residual connections"),
    (
        "train.session_mask",
        "true",
        Kind::Bool,
        "session-aware masking",
    ),
    (
        "train.metagr_session_mask",
        "false",
        Kind::Bool,
        "paired session rule for METAGR",
    ),
    (
        "train.scale_scores",
        "false",
        Kind::Bool,
        "divide attention scores by T",
    ),
    ("train.eval_every", "250", Kind::Uint, "steps between evals"),
    (
        "train.max_seq",
        "64",
        Kind::Uint,
        "max interactions per sequence",
    ),
    (
        "train.verbose",
        "false",
        Kind::Bool,
        "log eval lines to stderr",
    ),
    (
        "train.split_quantile",
        "0.85",
        Kind::Float,
        "train/validation time split",
    ),
    ("cost.batch", "1", Kind::Uint, "B in the cost model"),
    ("cost.k", "32", Kind::Uint, "mean session length K"),
    ("cost.d_model", "64", Kind::Uint, "D in the cost model"),
    ("cost.heads", "1", Kind::Uint, "H in the cost model"),
    ("cost.layers", "1", Kind::Uint, "L in the cost model"),
    (
        "cost.n_grid",
        "512,1024,2048,4096,8192",
        Kind::UintList,
        "sequence lengths",
    ),
    ("cost.runtime_n", "512", Kind::Uint, "N for wall-clock runs"),
    ("cost.trials", "5", Kind::Uint, "wall-clock trials"),
    ("score.m", "16", Kind::Uint, "candidate microbatch size"),
];

/// Resolved configuration: schema defaults, then file entries, then
/// command-line overrides, validated at every layer.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

fn schema_entry(key: &str) -> Option<&'static (&'static str, &'static str, Kind, &'static str)> {
    SCHEMA.iter().find(|(k, ..)| *k == key)
}

fn check_value(key: &str, value: &str, kind: Kind) -> Result<(), ConfigError> {
    let bad = |message: String| ConfigError::BadValue {
        key: key.to_string(),
        message,
    };
    match kind {
        Kind::Uint => value
            .parse::<u64>()
            .map(|_| ())
            .map_err(|_| bad(format!("expected a non-negative integer, got {value:?}"))),
        Kind::Int => value
            .parse::<i64>()
            .map(|_| ())
            .map_err(|_| bad(format!("expected an integer, got {value:?}"))),
        Kind::Float => value
            .parse::<f64>()
            .map(|_| ())
            .map_err(|_| bad(format!("expected a number, got {value:?}"))),
        Kind::Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(bad(format!("expected true or false, got {value:?}"))),
        },
        Kind::Paradigm => value.parse::<Paradigm>().map(|_| ()).map_err(&bad),
        Kind::UintList => {
            if value.is_empty() {
                return Ok(());
            }
            for part in value.split(',') {
                part.parse::<u64>().map_err(|_| {
                    bad(format!("expected comma-separated integers, got {value:?}"))
                })?;
            }
            Ok(())
        }
    }
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig::default()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let (_, _, kind, _) = schema_entry(key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.to_string(),
        })?;
        check_value(key, value, *kind)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn load_file(&mut self, path: &std::path::Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.load_str(&text)
    }

    pub fn load_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: lineno + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| schema_entry(key).expect("key is in schema").1)
    }

    pub fn get_usize(&self, key: &str) -> usize {
        self.get(key).parse().expect("validated on set")
    }

    pub fn get_u64(&self, key: &str) -> u64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn get_i64(&self, key: &str) -> i64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn get_f64(&self, key: &str) -> f64 {
        self.get(key).parse().expect("validated on set")
    }

    pub fn get_bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn get_usize_list(&self, key: &str) -> Vec<usize> {
        let v = self.get(key);
        if v.is_empty() {
            return Vec::new();
        }
        v.split(',')
            .map(|p| p.parse().expect("validated"))
            .collect()
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            num_users: self.get_usize("gen.users"),
            num_items: self.get_usize("gen.items"),
            sessions_per_user: self.get_f64("gen.sessions_per_user"),
            session_len: self.get_f64("gen.session_len"),
            latent_dim: self.get_usize("gen.latent_dim"),
            drift: self.get_f64("gen.drift"),
            affinity_weight: self.get_f64("gen.affinity"),
            item_bias_weight: self.get_f64("gen.item_bias"),
            recency_weight: self.get_f64("gen.recency"),
            base_logit: self.get_f64("gen.base_logit"),
            num_categories: self.get_usize("gen.categories"),
            num_segments: self.get_usize("gen.segments"),
            seed: self.get_u64("gen.seed"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let decay_start = self.get_i64("train.decay_start");
        TrainConfig {
            paradigm: self.get("train.paradigm").parse().expect("validated"),
            batch_size: self.get_usize("train.batch"),
            steps: self.get_usize("train.steps"),
            base_lr: self.get_f64("train.base_lr"),
            decay_per_1k: self.get_f64("train.decay_per_1k"),
            decay_start_step: if decay_start < 0 {
                usize::MAX
            } else {
                decay_start as usize
            },
            seed: self.get_u64("train.seed"),
            d_model: self.get_usize("train.d_model"),
            heads: self.get_usize("train.heads"),
            layers: self.get_usize("train.layers"),
            residual: self.get_bool("train.residual"),
            session_mask: self.get_bool("train.session_mask"),
            metagr_session_mask: self.get_bool("train.metagr_session_mask"),
            scale_scores: self.get_bool("train.scale_scores"),
            eval_every: self.get_usize("train.eval_every"),
            max_seq: self.get_usize("train.max_seq"),
            verbose: self.get_bool("train.verbose"),
        }
    }

    pub fn split_quantile(&self) -> f64 {
        self.get_f64("train.split_quantile")
    }

    pub fn cost_models(&self) -> Result<Vec<CostModel>, ConfigError> {
        self.get_usize_list("cost.n_grid")
            .into_iter()
            .map(|n| {
                Ok(CostModel::new(
                    self.get_usize("cost.batch"),
                    n,
                    self.get_usize("cost.k"),
                    self.get_usize("cost.d_model"),
                    self.get_usize("cost.heads"),
                    self.get_usize("cost.layers"),
                )?)
            })
            .collect()
    }

    /// Every key with its resolved value, for embedding into reports.
    pub fn resolved(&self) -> BTreeMap<String, String> {
        SCHEMA
            .iter()
            .map(|(k, ..)| (k.to_string(), self.get(k).to_string()))
            .collect()
    }

    pub fn schema_help() -> String {
        let mut out = String::from("configuration keys (key = default — description):\n");
        for (k, default, _, help) in SCHEMA {
            out.push_str(&format!("  {k} = {default} — {help}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let mut cfg = RunConfig::new();
        assert_eq!(cfg.get_usize("train.steps"), 1000);
        cfg.set("train.steps", "50").unwrap();
        assert_eq!(cfg.get_usize("train.steps"), 50);
        assert_eq!(cfg.train_config().decay_start_step, usize::MAX);
        cfg.set("train.decay_start", "300").unwrap();
        assert_eq!(cfg.train_config().decay_start_step, 300);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = RunConfig::new();
        assert!(matches!(
            cfg.set("train.stepz", "50"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            cfg.load_str("nonsense.key = 1\n"),
            Err(ConfigError::UnknownKey { .. })
        ));
    }

    #[test]
    fn bad_values_rejected_with_key() {
        let mut cfg = RunConfig::new();
        let err = cfg.set("train.paradigm", "HYBRID").unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("METAGR") && msg.contains("SFGR") && msg.contains("DFGR"),
            "{msg}"
        );
        assert!(cfg.set("train.batch", "-3").is_err());
        assert!(cfg.set("train.residual", "yes").is_err());
        assert!(cfg.set("cost.n_grid", "12,x").is_err());
    }

    #[test]
    fn file_syntax_and_comments() {
        let mut cfg = RunConfig::new();
        cfg.load_str("# comment\ntrain.steps = 77 # trailing\n\ngen.users=3\n")
            .unwrap();
        assert_eq!(cfg.get_usize("train.steps"), 77);
        assert_eq!(cfg.get_usize("gen.users"), 3);
        assert!(matches!(
            cfg.load_str("not a pair\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn empty_grid_allowed() {
        let mut cfg = RunConfig::new();
        cfg.set("cost.n_grid", "").unwrap();
        assert!(cfg.cost_models().unwrap().is_empty());
    }

    #[test]
    fn resolved_covers_schema() {
        let cfg = RunConfig::new();
        let all = cfg.resolved();
        assert_eq!(all.len(), SCHEMA.len());
        assert_eq!(all["train.paradigm"], "DFGR");
    }
}

//! Run configuration: presets, TOML merging, strict validation and hashing.
//!
//! A document picks a preset (`desk` or `full`) and overrides any subset of
//! its keys. Keys that do not exist in the preset are rejected, type errors
//! report their dotted path, and every violated invariant is listed at once.

use std::fmt;

use mtr_core::evaluation::{BenchConfig, EvalConfig};
use mtr_core::model::{HeadKind, ModelConfig, ModelMode};
use mtr_core::scene::GeneratorConfig;
use mtr_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

/// One problem found in a configuration document.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        message: message.into(),
    }
}

/// Desk scale: one CPU, minutes of training on the synthetic intersection.
pub fn desk_preset() -> RunConfig {
    RunConfig {
        preset: "desk".into(),
        seed: 0,
        model: ModelConfig::default(),
        data: DataConfig {
            generator: GeneratorConfig {
                intent_probs: [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0],
                ..GeneratorConfig::default()
            },
            train_scenes: 3000,
            eval_scenes: 500,
        },
        train: TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 10,
            decay_start: 8,
            decay_every: 1,
            ..TrainConfig::default()
        },
        eval: EvalConfig::default(),
        bench: BenchConfig::default(),
    }
}

/// The published hyperparameters. Far beyond desk compute; kept so every
/// published value has a named key.
pub fn full_preset() -> RunConfig {
    let mut model = ModelConfig {
        mode: ModelMode::MtrPlusPlus,
        head: HeadKind::IntentionQuery,
        future_frames: 80,
        ..ModelConfig::default()
    };
    model.encoder.num_layers = 6;
    model.encoder.hidden_dim = 256;
    model.encoder.num_heads = 8;
    model.encoder.neighbors = 16;
    model.encoder.polyline_layers = vec![256, 256];
    model.decoder.num_layers = 6;
    model.decoder.num_modes = 64;
    model.decoder.map_collect = 128;
    model.decoder.num_heads = 8;
    model.decoder.query_neighbors = 16;
    model.vectorize.max_map_polylines = 768;
    model.vectorize.points_per_polyline = 20;
    RunConfig {
        preset: "full".into(),
        seed: 0,
        model,
        data: DataConfig {
            generator: GeneratorConfig {
                future_frames: 80,
                ..GeneratorConfig::default()
            },
            train_scenes: 3000,
            eval_scenes: 500,
        },
        train: TrainConfig::default(),
        eval: EvalConfig::default(),
        bench: BenchConfig::default(),
    }
}

pub fn preset(name: &str) -> Option<RunConfig> {
    match name {
        "desk" => Some(desk_preset()),
        "full" => Some(full_preset()),
        _ => None,
    }
}

/// Dotted paths of user keys that the preset does not define.
fn unknown_keys(user: &toml::Table, base: &toml::Table, prefix: &str, out: &mut Vec<ConfigIssue>) {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (v, base.get(k)) {
            (_, None) => out.push(issue(path, "unknown key")),
            (toml::Value::Table(u), Some(toml::Value::Table(b))) => unknown_keys(u, b, &path, out),
            _ => {}
        }
    }
}

/// Overlays `user` onto `base`, recursing into tables; other values replace.
fn merge(base: &mut toml::Table, user: &toml::Table) {
    for (k, v) in user {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Cross-field and per-section invariants.
pub fn check_invariants(cfg: &RunConfig) -> Vec<ConfigIssue> {
    let mut errs: Vec<ConfigIssue> = cfg
        .model
        .check()
        .into_iter()
        .map(|(p, m)| issue(format!("model.{p}"), m))
        .collect();
    for (f, m) in cfg.train.check() {
        errs.push(issue(format!("train.{f}"), m));
    }
    for (f, m) in cfg.eval.check() {
        errs.push(issue(format!("eval.{f}"), m));
    }
    for (f, m) in cfg.bench.check() {
        errs.push(issue(format!("bench.{f}"), m));
    }
    if let Err(list) = cfg.data.generator.validate() {
        errs.extend(list.into_iter().map(|m| issue("data.generator", m)));
    }
    if cfg.data.generator.future_frames != cfg.model.future_frames {
        errs.push(issue(
            "model.future_frames",
            format!(
                "must equal data.generator.future_frames ({} vs {})",
                cfg.model.future_frames, cfg.data.generator.future_frames
            ),
        ));
    }
    if let Some(bad) = cfg
        .model
        .vectorize
        .categories
        .iter()
        .all(|c| *c != cfg.data.generator.category)
        .then_some(&cfg.data.generator.category)
    {
        errs.push(issue(
            "data.generator.category",
            format!("`{bad}` is not listed in model.vectorize.categories"),
        ));
    }
    if cfg.data.train_scenes == 0 {
        errs.push(issue("data.train_scenes", "must be at least 1"));
    }
    if cfg.data.eval_scenes == 0 {
        errs.push(issue("data.eval_scenes", "must be at least 1"));
    }
    errs
}

/// Parses and validates a TOML document against its preset. Either a complete
/// configuration or every problem found is returned.
pub fn validate_config(text: &str) -> Result<RunConfig, Vec<ConfigIssue>> {
    let user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| vec![issue("<document>", e.message().to_string())])?;
    let name = match user.get("preset") {
        None => "desk".to_string(),
        Some(toml::Value::String(s)) => s.clone(),
        Some(_) => return Err(vec![issue("preset", "must be a string")]),
    };
    let base = preset(&name).ok_or_else(|| vec![issue("preset", format!("unknown preset `{name}` (desk, full)"))])?;
    let mut tree = toml::Table::try_from(&base).map_err(|e| vec![issue("<preset>", e.to_string())])?;

    let mut errs = Vec::new();
    unknown_keys(&user, &tree, "", &mut errs);
    if !errs.is_empty() {
        return Err(errs);
    }
    merge(&mut tree, &user);
    let cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(tree)).map_err(|e| {
        let path = e.path().to_string();
        vec![issue(path, e.into_inner().to_string())]
    })?;
    let errs = check_invariants(&cfg);
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

/// First 16 hex digits of the SHA-256 of the canonical JSON form.
pub fn config_hash(cfg: &RunConfig) -> String {
    let canonical = serde_json::to_vec(cfg).expect("configuration serializes");
    let digest = Sha256::digest(&canonical);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

//! Run configuration: `key = value` files with `#` comments, overridden by
//! `--key value` flags. Keys left unset take the chosen preset's value.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use vagcn_core::error::{Error, Result};
use vagcn_core::model::{ModelConfig, Task};
use vagcn_core::train::TrainConfig;

/// Model keys, with help text.
pub const MODEL_KEYS: &[(&str, &str)] = &[
    ("k", "neighbours per point"),
    ("radii_layer1", "receptive fields of layer 1, comma separated"),
    ("radii_layer2", "receptive fields of layer 2"),
    ("radii_fusion", "receptive fields of the fusion layer"),
    ("edge_widths", "output widths of the three EdgeConv layers"),
    ("stem_width", "width of the point-wise stem"),
    ("layer1_width", "total width of layer 1 (split across branches)"),
    ("layer2_width", "total width of layer 2"),
    ("fusion_width", "total width of the fusion layer"),
    ("head_widths", "hidden widths of the head"),
    ("label_width", "category embedding width (segmentation)"),
    ("num_categories", "one-hot category width (segmentation)"),
    ("parallel_variant", "v0 | v1 | v2 | v3"),
    ("channel_variant", "edgeconv_only | vaconv_only | dual"),
    ("aggregation_mode", "sum | weighted_max"),
    ("angular_mode", "cos_of_ratio | ratio"),
    ("graph_space", "coords | features"),
];

/// Training keys, with help text.
pub const TRAIN_KEYS: &[(&str, &str)] = &[
    ("batch_size", "clouds per step"),
    ("lr", "initial learning rate"),
    ("weight_decay", "decoupled weight decay"),
    ("epochs", "passes over the training set"),
    ("augment", "random scale, jitter and shift while training"),
];

/// Keys that belong to neither struct directly.
pub const GLOBAL_KEYS: &[(&str, &str)] = &[
    ("preset", "desk | full | micro: base widths before overrides"),
    ("seed", "initialisation and shuffling seed"),
];

pub fn all_keys() -> impl Iterator<Item = &'static (&'static str, &'static str)> {
    GLOBAL_KEYS.iter().chain(MODEL_KEYS).chain(TRAIN_KEYS)
}

fn is_key(k: &str) -> bool {
    all_keys().any(|(name, _)| *name == k)
}

/// Explicitly set keys; later assignments win.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("{source}:{}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("{source}:{}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !is_key(key) {
            return Err(Error::Config(format!("unknown key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn base_model(&self, num_classes: usize, points: usize) -> Result<ModelConfig> {
        Ok(match self.get("preset").unwrap_or("desk") {
            "desk" => ModelConfig::desk(num_classes, points),
            "full" => ModelConfig::full(num_classes, points),
            "micro" => ModelConfig::micro(num_classes, points),
            other => return Err(Error::Config(format!("unknown preset {other:?} (expected desk, full or micro)"))),
        })
    }

    /// Applies every set model key (and `seed`) on top of `base`.
    pub fn apply_model(&self, base: ModelConfig) -> Result<ModelConfig> {
        let keys = MODEL_KEYS.iter().map(|(k, _)| *k).chain(["seed"]);
        let cfg: ModelConfig = overlay(&base, keys.filter_map(|k| self.get(k).map(|v| (k, v))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full model configuration for a dataset's shape.
    pub fn model(&self, task: Task, num_classes: usize, points: usize, extra_channels: usize) -> Result<ModelConfig> {
        let base = ModelConfig {
            task,
            extra_channels,
            ..self.base_model(num_classes, points)?
        };
        self.apply_model(base)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        let keys = TRAIN_KEYS.iter().map(|(k, _)| *k).chain(["seed"]);
        let tc: TrainConfig = overlay(&TrainConfig::default(), keys.filter_map(|k| self.get(k).map(|v| (k, v))))?;
        tc.validate()?;
        Ok(tc)
    }

    /// Every key with its resolved value, as `key = value` lines.
    pub fn render(&self, model: &ModelConfig, train: &TrainConfig) -> String {
        let m = serde_json::to_value(model).expect("config serialises");
        let t = serde_json::to_value(train).expect("config serialises");
        let mut out = String::new();
        out.push_str(&format!("preset = {}\n", self.get("preset").unwrap_or("desk")));
        out.push_str(&format!("seed = {}\n", train.seed));
        for (k, _) in MODEL_KEYS {
            out.push_str(&format!("{k} = {}\n", show(&m[*k])));
        }
        for (k, _) in TRAIN_KEYS {
            out.push_str(&format!("{k} = {}\n", show(&t[*k])));
        }
        out
    }
}

fn show(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(show).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

/// Parses `text` into the JSON type of `old`.
fn parse_like(key: &str, old: &Value, text: &str) -> Result<Value> {
    let bad = || Error::Config(format!("{key}: cannot parse {text:?}"));
    let number = |t: &str| match serde_json::from_str::<Value>(t.trim()) {
        Ok(v @ Value::Number(_)) => Ok(v),
        _ => Err(bad()),
    };
    match old {
        Value::Array(_) if text.trim().is_empty() => Ok(Value::Array(Vec::new())),
        Value::Array(_) => text.split(',').map(number).collect::<Result<Vec<_>>>().map(Value::Array),
        Value::Number(_) => number(text),
        Value::Bool(_) => text.trim().parse().map(Value::Bool).map_err(|_| bad()),
        Value::String(_) => Ok(Value::String(text.trim().to_string())),
        _ => Err(bad()),
    }
}

/// Round-trips `base` through JSON with `values` substituted, so every
/// field is type-checked by its own deserialiser.
fn overlay<'a, C: Serialize + DeserializeOwned>(base: &C, values: impl Iterator<Item = (&'a str, &'a str)>) -> Result<C> {
    let mut obj = serde_json::to_value(base).expect("config serialises");
    for (k, v) in values {
        let slot = obj.get_mut(k).ok_or_else(|| Error::Config(format!("unknown key {k:?}")))?;
        *slot = parse_like(k, slot, v)?;
    }
    serde_json::from_value(obj).map_err(|e| Error::Config(e.to_string()))
}

//! Flat `key = value` configuration: per-subcommand key registries, config
//! file parsing, and resolution with command-line overrides.

use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Debug)]
pub struct KeySpec {
    pub key: &'static str,
    pub help: &'static str,
    pub default: String,
}

impl KeySpec {
    fn new(key: &'static str, help: &'static str, default: impl ToString) -> Self {
        Self {
            key,
            help,
            default: default.to_string(),
        }
    }

    /// `bag_param` → `bag-param`.
    pub fn flag(&self) -> String {
        self.key.replace('_', "-")
    }
}

pub fn train_keys() -> Vec<KeySpec> {
    let d = TrainConfig::default();
    TrainConfig::KEYS
        .iter()
        .map(|&(k, h)| KeySpec::new(k, h, d.get(k).expect("listed key")))
        .collect()
}

pub fn gen_data_keys() -> Vec<KeySpec> {
    vec![
        KeySpec::new("n", "number of instances", 5000),
        KeySpec::new("dim", "input width", 32),
        KeySpec::new("classes", "number of classes", 10),
        KeySpec::new("class_sep", "norm of each class center", 3.0),
        KeySpec::new("noise", "per-coordinate noise standard deviation", 1.0),
        KeySpec::new("val_fraction", "held-out fraction, stratified by class", 0.2),
        KeySpec::new("seed", "master seed", 0),
    ]
}

pub fn embed_keys() -> Vec<KeySpec> {
    vec![
        KeySpec::new("feature_source", "projection | backbone", "projection"),
        KeySpec::new("split", "train | val", "train"),
    ]
}

pub fn bag_keys() -> Vec<KeySpec> {
    vec![
        KeySpec::new("strategy", "knn | kmeans | labels", "knn"),
        KeySpec::new("k", "neighbors per bag for knn", 5),
        KeySpec::new("c", "clusters for kmeans", 10),
        KeySpec::new("kmeans_max_iters", "Lloyd iteration cap", 50),
        KeySpec::new("seed", "k-means seed", 0),
    ]
}

pub fn eval_keys() -> Vec<KeySpec> {
    vec![
        KeySpec::new("mode", "knn | linear | finetune | bagdis | intra-class", "knn"),
        KeySpec::new("k", "neighbors for knn", 10),
        KeySpec::new(
            "feature_source",
            "projection | backbone features for knn, linear",
            "projection",
        ),
        KeySpec::new("fraction", "labeled fraction for finetune", 0.01),
        KeySpec::new("seed", "probe and finetune seed", 0),
        KeySpec::new("probe_epochs", "linear probe epochs", 100),
        KeySpec::new("probe_lr", "linear probe learning rate", 0.5),
        KeySpec::new("finetune_epochs", "finetune epochs", 30),
        KeySpec::new("finetune_lr", "finetune backbone learning rate", 0.01),
    ]
}

pub fn sweep_keys() -> Vec<KeySpec> {
    let mut keys = vec![
        KeySpec::new("param", "k (knn bags) | c (kmeans bags)", "k"),
        KeySpec::new("values", "comma separated values of the swept parameter", "1,5,10,20"),
        KeySpec::new("jobs", "parallel runs, one process each", 1),
        KeySpec::new("eval_k", "neighbors for the knn report", 10),
    ];
    keys.extend(train_keys());
    keys
}

/// Resolved values in registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    values: Vec<(&'static str, String)>,
}

impl Settings {
    pub fn get(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("`{key}` is not a registered key"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.trim()
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
    }

    pub fn pairs(&self) -> &[(&'static str, String)] {
        &self.values
    }

    /// Applies every key that [`TrainConfig`] knows.
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut c = TrainConfig::default();
        for (k, v) in &self.values {
            if c.get(k).is_some() {
                c.set(k, v)?;
            }
        }
        Ok(c)
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim().replace('-', "_");
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k, v.trim().to_string()));
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_text(&text)
}

/// Defaults, then the config file, then flags. Unknown keys are rejected.
pub fn resolve(registry: &[KeySpec], file: &[(String, String)], flags: &[(String, String)]) -> Result<Settings> {
    let mut values: Vec<(&'static str, String)> = registry.iter().map(|s| (s.key, s.default.clone())).collect();
    for (k, v) in file.iter().chain(flags) {
        let slot = values
            .iter_mut()
            .find(|(key, _)| key == k)
            .ok_or_else(|| Error::Config(format!("unknown key `{k}`")))?;
        slot.1 = v.clone();
    }
    Ok(Settings { values })
}

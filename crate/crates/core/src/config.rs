//! Flat TOML configuration: one table of keys covering generation, training
//! and evaluation, plus `version` and an optional `seed`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::retrieval::Cutoff;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// `"all"` or a rank cutoff such as `"100"`.
    pub cutoff: String,
    pub per_bl_matrix: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cutoff: "all".into(),
            per_bl_matrix: false,
        }
    }
}

impl EvalConfig {
    pub fn cutoff(&self) -> Result<Cutoff> {
        self.cutoff.parse()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub seed: Option<u64>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn keys_of<T: Serialize + Default>() -> Vec<String> {
    match toml::Table::try_from(T::default()) {
        Ok(t) => t.keys().cloned().collect(),
        Err(_) => Vec::new(),
    }
}

fn section<T: for<'de> Deserialize<'de>>(table: &toml::Table, keys: &[String]) -> Result<T> {
    let sub: toml::Table = table
        .iter()
        .filter(|(k, _)| keys.contains(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    sub.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let dataset_keys = keys_of::<DatasetConfig>();
        let train_keys = keys_of::<TrainConfig>();
        let eval_keys = keys_of::<EvalConfig>();
        for key in table.keys() {
            let known = ["version", "seed"].contains(&key.as_str())
                || dataset_keys.contains(key)
                || train_keys.contains(key)
                || eval_keys.contains(key);
            if !known {
                return Err(Error::Config(format!("unknown key {key:?}")));
            }
        }
        match table.get("version") {
            Some(toml::Value::Integer(v)) if *v == i64::from(CONFIG_VERSION) => {}
            Some(v) => return Err(Error::Config(format!("unsupported config version {v}"))),
            None => return Err(Error::Config("missing key \"version\"".into())),
        }
        let seed = match table.get("seed") {
            None => None,
            Some(toml::Value::Integer(s)) if *s >= 0 => Some(*s as u64),
            Some(v) => return Err(Error::Config(format!("seed must be a nonnegative integer, got {v}"))),
        };
        let config = Config {
            seed,
            dataset: section(&table, &dataset_keys)?,
            train: section(&table, &train_keys)?,
            eval: section(&table, &eval_keys)?,
        };
        config.eval.cutoff()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_toml_str(&text)
    }

    /// Every key with its value, `version` first.
    pub fn to_toml_string(&self) -> Result<String> {
        let mut table = toml::Table::new();
        table.insert("version".into(), toml::Value::Integer(i64::from(CONFIG_VERSION)));
        if let Some(s) = self.seed {
            table.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        let to_err = |e: toml::ser::Error| Error::Config(e.to_string());
        table.extend(toml::Table::try_from(&self.dataset).map_err(to_err)?);
        table.extend(toml::Table::try_from(&self.train).map_err(to_err)?);
        table.extend(toml::Table::try_from(&self.eval).map_err(to_err)?);
        toml::to_string(&table).map_err(to_err)
    }
}

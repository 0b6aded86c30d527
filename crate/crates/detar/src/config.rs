//! Run configuration.
//!
//! Files are JSON objects with flat dotted keys such as `"model.channels": 64`.
//! Keys are checked against the defaults, so a typo is an error rather than a
//! silently ignored setting. Overrides use the same keys with JSON values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use detar_core::data::{ratio_grid, GenSpec};
use detar_core::eval::EvalOptions;
use detar_core::nn::DetarConfig;
use detar_core::train::TrainConfig;

use crate::error::{Error, Result};
use crate::manifest::SplitCounts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: GenSpec,
    /// Inlier ratios cycled through by the generated sets.
    pub ratios: Vec<f64>,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            spec: GenSpec::default(),
            ratios: ratio_grid(0.3, 0.7, 5),
            counts: SplitCounts { train: 256, val: 64, test: 64 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: DetarConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: DetarConfig::desk(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate().map_err(|e| Error::Config(format!("train: {e}")))?;
        self.data.spec.validate().map_err(|e| Error::Config(format!("data.spec: {e}")))?;
        if self.data.ratios.is_empty() || self.data.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config(format!("data.ratios must be non-empty and within [0, 1], got {:?}", self.data.ratios)));
        }
        let c = &self.data.counts;
        if c.train == 0 || c.val == 0 || c.test == 0 {
            return Err(Error::Config("data.counts must all be positive".into()));
        }
        let e = &self.eval;
        if !(e.recall_deg > 0.0 && e.recall_trans > 0.0 && e.map_steps > 0) {
            return Err(Error::Config("eval thresholds and map_steps must be positive".into()));
        }
        if e.bin_edges.len() < 2 || e.bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("eval.bin_edges must be strictly increasing with at least two edges".into()));
        }
        Ok(())
    }

    /// Flat dotted-key view.
    pub fn to_flat(&self) -> Result<Map<String, Value>> {
        let mut out = Map::new();
        flatten("", serde_json::to_value(self)?, &mut out);
        Ok(out)
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(unflatten(flat)?).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Applies `key = value` pairs on top of `self`. Unknown keys are rejected.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, Value)>) -> Result<Self> {
        let mut flat = self.to_flat()?;
        for (key, value) in pairs {
            let known = flat.contains_key(key) || flat.keys().any(|k| k.starts_with(&format!("{key}.")));
            if !known {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
            flat.retain(|k, _| !k.starts_with(&format!("{key}.")));
            flat.insert(key.to_string(), value);
        }
        Self::from_flat(&flat)
    }

    /// Defaults overlaid with a flat JSON config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let Value::Object(map) = serde_json::from_str::<Value>(&text)? else {
            return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
        };
        RunConfig::default().with_overrides(map.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }
}

/// Parses `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

fn flatten(prefix: &str, v: Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other);
        }
    }
}

fn unflatten(flat: &Map<String, Value>) -> Result<Value> {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut node = &mut root;
        for p in parts {
            let entry = node.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            node = entry.as_object_mut().ok_or_else(|| Error::Config(format!("`{key}` conflicts with a scalar key")))?;
        }
        node.insert(last.to_string(), value.clone());
    }
    Ok(Value::Object(root))
}

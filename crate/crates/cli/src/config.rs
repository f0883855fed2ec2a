//! Flat TOML experiment configs.
//!
//! The document is a single table of scalar values — no nested tables, no
//! TOML arrays. Lists (pipelines, schedules) are comma-separated strings,
//! so that a config stays a flat, diffable key-value record. Unknown keys
//! are rejected rather than ignored: a typo must not silently fall back
//! to a default.

use std::path::Path;

use anchorlab::error::{Error, Result};

/// Every key a config file may contain, with the flag it mirrors.
pub const KNOWN_KEYS: &[&str] = &[
    // model
    "num_layers",
    "model_dim",
    "num_heads",
    "ff_dim",
    "vocab_size",
    "max_seq_len",
    "init_seed",
    "temperature",
    "top_k",
    // corpus: either a directory or generation parameters
    "corpus_dir",
    "corpus_seed",
    "n_per_class",
    "n_test_per_class",
    "min_len",
    "max_len",
    "shared_vocab_fraction",
    "delta",
    // run
    "pipelines",
    "runs",
    "base_seed",
    "demo_pairs",
    "ensemble_size",
    "epsilon",
    "schedule",
    "baseline",
    "tv_context_with_demos",
    "workers",
    "out_dir",
];

#[derive(Debug)]
pub struct FlatConfig {
    table: toml::Table,
}

impl FlatConfig {
    pub fn empty() -> Self {
        FlatConfig { table: toml::Table::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let table: toml::Table = toml::from_str(&raw)
            .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?;
        for (key, value) in &table {
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "unknown config key '{key}' in {}",
                    path.display()
                )));
            }
            if value.as_str().is_none()
                && value.as_integer().is_none()
                && value.as_float().is_none()
                && value.as_bool().is_none()
            {
                return Err(Error::Config(format!(
                    "config key '{key}' must be a scalar; the document is flat \
                     and lists are comma-separated strings"
                )));
            }
        }
        Ok(FlatConfig { table })
    }

    fn integer(&self, key: &str) -> Result<Option<i64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v.as_integer().map(Some).ok_or_else(|| {
                Error::Config(format!("config key '{key}' must be an integer"))
            }),
        }
    }

    pub fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.integer(key)? {
            None => Ok(None),
            Some(v) if v >= 0 => Ok(Some(v as usize)),
            Some(v) => Err(Error::Config(format!("config key '{key}' must be >= 0, got {v}"))),
        }
    }

    pub fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.integer(key)? {
            None => Ok(None),
            Some(v) if v >= 0 => Ok(Some(v as u64)),
            Some(v) => Err(Error::Config(format!("config key '{key}' must be >= 0, got {v}"))),
        }
    }

    pub fn u32(&self, key: &str) -> Result<Option<u32>> {
        match self.integer(key)? {
            None => Ok(None),
            Some(v) if (0..=u32::MAX as i64).contains(&v) => Ok(Some(v as u32)),
            Some(v) => {
                Err(Error::Config(format!("config key '{key}' out of 32-bit range: {v}")))
            }
        }
    }

    pub fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .map(Some)
                .ok_or_else(|| Error::Config(format!("config key '{key}' must be a number"))),
        }
    }

    pub fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v.as_bool().map(Some).ok_or_else(|| {
                Error::Config(format!("config key '{key}' must be a boolean"))
            }),
        }
    }

    pub fn string(&self, key: &str) -> Result<Option<String>> {
        match self.table.get(key) {
            None => Ok(None),
            Some(v) => v.as_str().map(|s| Some(s.to_string())).ok_or_else(|| {
                Error::Config(format!("config key '{key}' must be a string"))
            }),
        }
    }

    pub fn string_list(&self, key: &str) -> Result<Option<Vec<String>>> {
        Ok(self.string(key)?.map(|s| split_list(&s)))
    }

    pub fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.string(key)? {
            None => Ok(None),
            Some(s) => Ok(Some(parse_f64_list(key, &s)?)),
        }
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect()
}

pub fn parse_f64_list(what: &str, s: &str) -> Result<Vec<f64>> {
    split_list(s)
        .iter()
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::Config(format!("{what}: '{p}' is not a number")))
        })
        .collect()
}

pub fn parse_usize_list(what: &str, s: &str) -> Result<Vec<usize>> {
    split_list(s)
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("{what}: '{p}' is not a non-negative integer")))
        })
        .collect()
}

pub fn parse_u32_list(what: &str, s: &str) -> Result<Vec<u32>> {
    split_list(s)
        .iter()
        .map(|p| {
            p.parse::<u32>()
                .map_err(|_| Error::Config(format!("{what}: '{p}' is not a token id")))
        })
        .collect()
}

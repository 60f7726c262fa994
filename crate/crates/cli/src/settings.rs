//! Layered settings: command-line flags override a flat `key = value`
//! config file, which overrides built-in defaults.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

/// Keys are compared with `_` and `-` treated alike.
fn normalize(key: &str) -> String {
    key.trim().to_ascii_lowercase().replace('_', "-")
}

impl ConfigFile {
    /// Parses `key = value` lines. `#` starts a comment; blank lines are
    /// skipped. A repeated key keeps its last value.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                anyhow!("config line {}: expected key = value, got {raw:?}", n + 1)
            })?;
            let key = normalize(k);
            if key.is_empty() {
                bail!("config line {}: empty key", n + 1);
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(&normalize(key)) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("config key {key}: cannot parse {v:?}: {e}")),
        }
    }

    /// Keys not in `known`, for warning about typos.
    pub fn unknown_keys<'a>(&'a self, known: &'a [&str]) -> impl Iterator<Item = &'a str> + 'a {
        self.values
            .keys()
            .filter(move |k| !known.iter().any(|q| normalize(q) == **k))
            .map(String::as_str)
    }

    pub fn insert(&mut self, key: &str, value: impl ToString) {
        self.values.insert(normalize(key), value.to_string());
    }
}

/// Resolves one setting: flag, else config value, else default.
pub fn pick<T: FromStr>(flag: Option<T>, config: &ConfigFile, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => v,
        None => config.get(key)?.unwrap_or(default),
    })
}

/// Like [`pick`] without a default.
pub fn pick_opt<T: FromStr>(flag: Option<T>, config: &ConfigFile, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    Ok(match flag {
        Some(v) => Some(v),
        None => config.get(key)?,
    })
}

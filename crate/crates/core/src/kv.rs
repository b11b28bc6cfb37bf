//! Flat `key=value` text used for run configs and checkpoint manifests.
//! Blank lines and lines starting with `#` are ignored; keys are unique.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key=value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: duplicate key `{key}`")]
    Duplicate { line: usize, key: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("key `{key}`: cannot parse `{value}`: {msg}")]
    Value { key: String, value: String, msg: String },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap {
    entries: BTreeMap<String, String>,
}

impl KvMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax { line: i + 1, text: raw.to_string() });
            };
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(KvError::Syntax { line: i + 1, text: raw.to_string() });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(KvError::Duplicate { line: i + 1, key });
            }
        }
        Ok(Self { entries })
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, KvError>
    where
        T::Err: fmt::Display,
    {
        let value = self.get_str(key).ok_or_else(|| KvError::Missing(key.to_string()))?;
        value.parse().map_err(|e: T::Err| KvError::Value {
            key: key.to_string(),
            value: value.to_string(),
            msg: e.to_string(),
        })
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, KvError>
    where
        T::Err: fmt::Display,
    {
        let value = self.get_str(key).ok_or_else(|| KvError::Missing(key.to_string()))?;
        value
            .split(',')
            .map(|s| {
                s.trim().parse().map_err(|e: T::Err| KvError::Value {
                    key: key.to_string(),
                    value: value.to_string(),
                    msg: e.to_string(),
                })
            })
            .collect()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overlays `other` on `self`, rejecting keys `self` does not define.
    pub fn overlay(&mut self, other: &KvMap) -> Result<(), KvError> {
        for (k, v) in other.iter() {
            if !self.entries.contains_key(k) {
                return Err(KvError::UnknownKey(k.to_string()));
            }
            self.entries.insert(k.to_string(), v.to_string());
        }
        Ok(())
    }
}

impl fmt::Display for KvMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.entries {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

pub fn join_list<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys must come from
//! the caller's list of known keys; repeats are errors.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str, known: &[&str]) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !known.contains(&k) {
                return Err(Error::Config(format!("line {}: unknown key {k:?}", n + 1)));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
        }
        Ok(Config { entries })
    }

    pub fn load(path: impl AsRef<Path>, known: &[&str]) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, known)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Typed value of `key`, if present.
    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::Config(format!("bad value {v:?} for key {key:?}")))
            })
            .transpose()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_keys() {
        let c = Config::parse("# run\niters = 20\n\nloss=dense\n", &["iters", "loss"]).unwrap();
        assert_eq!(c.get::<usize>("iters").unwrap(), Some(20));
        assert_eq!(c.raw("loss"), Some("dense"));
        assert_eq!(c.get::<usize>("batch").unwrap(), None);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed() {
        assert!(Config::parse("foo = 1", &["iters"]).is_err());
        assert!(Config::parse("iters = 1\niters = 2", &["iters"]).is_err());
        assert!(Config::parse("iters 1", &["iters"]).is_err());
        let c = Config::parse("iters = x", &["iters"]).unwrap();
        assert!(c.get::<usize>("iters").is_err());
    }
}

//! Plain `key = value` configuration files.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Duplicate keys are rejected at load, and consumers call [`KvFile::finish`]
//! after taking their keys so unknown keys fail loudly instead of being
//! silently ignored.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct KvFile {
    path: PathBuf,
    pairs: Vec<(String, String, usize)>,
}

impl KvFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut pairs: Vec<(String, String, usize)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: "empty key".into(),
                });
            }
            if pairs.iter().any(|(k, _, _)| *k == key) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            pairs.push((key, value, lineno));
        }
        Ok(KvFile {
            path: path.to_path_buf(),
            pairs,
        })
    }

    pub fn take(&mut self, key: &str) -> Option<String> {
        let pos = self.pairs.iter().position(|(k, _, _)| k == key)?;
        Some(self.pairs.remove(pos).1)
    }

    pub fn take_required(&mut self, key: &str) -> Result<String> {
        self.take(key).ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("missing required key {key:?}"),
        })
    }

    fn parse_as<T: std::str::FromStr>(&self, key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| Error::Parse {
            path: self.path.clone(),
            line: 0,
            msg: format!("key {key:?}: cannot parse {value:?}"),
        })
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            Some(v) => self.parse_as(key, &v),
            None => Ok(default),
        }
    }

    pub fn take_u64(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            Some(v) => self.parse_as(key, &v),
            None => Ok(default),
        }
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            Some(v) => self.parse_as(key, &v),
            None => Ok(default),
        }
    }

    pub fn take_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            Some(v) => match v.as_str() {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                other => Err(Error::Parse {
                    path: self.path.clone(),
                    line: 0,
                    msg: format!("key {key:?}: expected a boolean, got {other:?}"),
                }),
            },
            None => Ok(default),
        }
    }

    /// Comma-separated list; empty value or absent key gives an empty list.
    pub fn take_list(&mut self, key: &str) -> Vec<String> {
        match self.take(key) {
            None => Vec::new(),
            Some(v) if v.trim().is_empty() => Vec::new(),
            Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        }
    }

    /// Reject any keys nobody consumed.
    pub fn finish(self) -> Result<()> {
        if let Some((key, _, line)) = self.pairs.first() {
            return Err(Error::Parse {
                path: self.path,
                line: *line,
                msg: format!("unknown key {key:?}"),
            });
        }
        Ok(())
    }
}

//! Flat `key = value` configuration text.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. Later
//! assignments override earlier ones. [`KvReader`] tracks which keys were
//! consumed so that misspelled keys surface as errors, and it accumulates
//! every problem instead of stopping at the first.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KvError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self, KvError> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: line.to_string(),
                });
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: line.to_string(),
                });
            }
            cfg.set(k, v.trim());
        }
        Ok(cfg)
    }

    /// Parses `key=value` override strings (CLI `--set`), last wins.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), KvError> {
        for (i, o) in overrides.iter().enumerate() {
            let o = o.as_ref();
            let Some((k, v)) = o.split_once('=') else {
                return Err(KvError::Syntax {
                    line: i + 1,
                    text: o.to_string(),
                });
            };
            self.set(k.trim(), v.trim());
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl fmt::Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn merge(&mut self, other: &FlatConfig) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }

    /// Canonical text: keys sorted, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        }
        s
    }

    pub fn reader(&self) -> KvReader<'_> {
        KvReader {
            cfg: self,
            used: Default::default(),
            errors: Vec::new(),
        }
    }
}

pub struct KvReader<'a> {
    cfg: &'a FlatConfig,
    used: std::collections::BTreeSet<String>,
    errors: Vec<String>,
}

impl KvReader<'_> {
    pub fn raw(&mut self, key: &str) -> Option<&str> {
        self.used.insert(key.to_string());
        self.cfg.get(key)
    }

    /// Typed value or `default` when absent. Parse failures are recorded.
    pub fn get_or<T>(&mut self, key: &str, default: T) -> T
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.raw(key).map(str::to_string) {
            None => default,
            Some(v) => match v.parse::<T>() {
                Ok(x) => x,
                Err(e) => {
                    self.errors.push(format!("`{key}` = `{v}`: {e}"));
                    default
                }
            },
        }
    }

    pub fn required<T>(&mut self, key: &str) -> Option<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.raw(key).map(str::to_string) {
            None => {
                self.errors.push(format!("missing required key `{key}`"));
                None
            }
            Some(v) => match v.parse::<T>() {
                Ok(x) => Some(x),
                Err(e) => {
                    self.errors.push(format!("`{key}` = `{v}`: {e}"));
                    None
                }
            },
        }
    }

    /// Comma-separated list.
    pub fn list_or<T>(&mut self, key: &str, default: Vec<T>) -> Vec<T>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.raw(key).map(str::to_string) {
            None => default,
            Some(v) => {
                let mut out = Vec::new();
                for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    match part.parse::<T>() {
                        Ok(x) => out.push(x),
                        Err(e) => {
                            self.errors.push(format!("`{key}` element `{part}`: {e}"));
                            return default;
                        }
                    }
                }
                out
            }
        }
    }

    /// Marks every key with the given prefix as consumed and returns them.
    pub fn with_prefix(&mut self, prefix: &str) -> Vec<(String, String)> {
        let hits: Vec<(String, String)> = self
            .cfg
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        for (k, _) in &hits {
            self.used.insert(k.clone());
        }
        hits
    }

    pub fn error(&mut self, msg: impl Into<String>) {
        self.errors.push(msg.into());
    }

    /// Fails with every recorded problem plus every unconsumed key.
    pub fn finish(self) -> Result<(), KvError> {
        let mut errors = self.errors;
        for (k, _) in self.cfg.iter() {
            if !self.used.contains(k) {
                errors.push(format!("unknown key `{k}`"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(KvError::Invalid(errors))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_overrides_and_canonical_text() {
        let mut c = FlatConfig::parse("# comment\nb = 2\n a=1 \nb = 3\n").unwrap();
        assert_eq!(c.get("b"), Some("3"));
        c.apply_overrides(&["a=5", "a=6"]).unwrap();
        assert_eq!(c.to_text(), "a = 6\nb = 3\n");
        assert_eq!(FlatConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn syntax_error_reports_line() {
        assert_eq!(
            FlatConfig::parse("a = 1\noops\n"),
            Err(KvError::Syntax {
                line: 2,
                text: "oops".into()
            })
        );
    }

    #[test]
    fn unknown_and_malformed_keys_are_all_reported() {
        let c = FlatConfig::parse("lr = fast\nbatch = 3\nbatchsize = 4\nlayres = 2\n").unwrap();
        let mut r = c.reader();
        let _: f64 = r.get_or("lr", 0.1);
        let _: usize = r.get_or("batch", 1);
        let err = r.finish().unwrap_err();
        let KvError::Invalid(list) = err else {
            panic!()
        };
        assert_eq!(list.len(), 3, "{list:?}");
        assert!(list.iter().any(|e| e.contains("batchsize")));
        assert!(list.iter().any(|e| e.contains("layres")));
        assert!(list.iter().any(|e| e.contains("lr")));
    }
}

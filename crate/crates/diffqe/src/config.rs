//! Flat key-value configuration files.
//!
//! One `key = value` pair per line, `#` starts a comment. Keys mirror the
//! CLI flag names exactly (kebab-case, no leading dashes); explicit flags
//! override file values.

use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        ConfigFile::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got: {raw}", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", lineno + 1)));
            }
            if values.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key: {key}")));
            }
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Reject keys that no flag of the active subcommand recognizes.
    pub fn restrict_to(&self, allowed: &[&str]) -> Result<()> {
        for k in self.values.keys() {
            if !allowed.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown config key: {k}")));
            }
        }
        Ok(())
    }

    /// Flag value if given, else config value, else the default.
    pub fn resolve<T: FromStr + Clone>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.values.get(key) {
            Some(s) => s
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {key}: {s}"))),
            None => Ok(default),
        }
    }

    /// Like `resolve` without a default.
    pub fn resolve_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if let Some(v) = flag {
            return Ok(Some(v));
        }
        match self.values.get(key) {
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value for {key}: {s}"))),
            None => Ok(None),
        }
    }
}

/// Comma-separated QP list ("27,32,37,42").
pub fn parse_qp_set(s: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let q: u8 = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad qp value: {part}")))?;
        if q > crate::plane::QP_MAX {
            return Err(Error::Config(format!("qp {q} exceeds {}", crate::plane::QP_MAX)));
        }
        out.push(q);
    }
    if out.is_empty() {
        return Err(Error::Config("empty qp set".into()));
    }
    Ok(out)
}

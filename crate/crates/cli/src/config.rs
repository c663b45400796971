//! `key = value` configuration resolved against per-command key tables.
//!
//! Precedence: command-line flag, then config file, then built-in default.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Value,
    /// A file read by the command; hashed into the manifest.
    Input,
    /// A file written by the command; hashed into the manifest.
    Output,
}

#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: Option<&'static str>,
    pub kind: KeyKind,
    pub help: &'static str,
}

pub const fn value(name: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default: Some(default), kind: KeyKind::Value, help }
}

pub const fn optional(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default: None, kind: KeyKind::Value, help }
}

pub const fn input(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default: None, kind: KeyKind::Input, help }
}

pub const fn output(name: &'static str, help: &'static str) -> KeySpec {
    KeySpec { name, default: None, kind: KeyKind::Output, help }
}

pub type Resolved = BTreeMap<String, String>;

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn resolve(specs: &[KeySpec], file: &BTreeMap<String, String>, flags: &BTreeMap<String, String>) -> Result<Resolved> {
    for k in file.keys().chain(flags.keys()) {
        if !specs.iter().any(|s| s.name == k) {
            return Err(CliError::Usage(format!("unknown key {k:?}")));
        }
    }
    let mut out = Resolved::new();
    for s in specs {
        let v = flags.get(s.name).or_else(|| file.get(s.name)).cloned().or_else(|| s.default.map(String::from));
        if let Some(v) = v {
            out.insert(s.name.to_string(), v);
        }
    }
    Ok(out)
}

/// Typed access to a resolved configuration.
pub struct Params<'a> {
    pub map: &'a Resolved,
}

impl<'a> Params<'a> {
    pub fn new(map: &'a Resolved) -> Self {
        Self { map }
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.map.get(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| CliError::Usage(format!("--{key} {v:?}: {e}"))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.opt(key)?.ok_or_else(|| CliError::Usage(format!("missing required --{key}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf> {
        self.get(key)
    }

    pub fn opt_path(&self, key: &str) -> Result<Option<PathBuf>> {
        self.opt(key)
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>>
    where
        T::Err: std::fmt::Display,
    {
        let raw: String = self.get(key)?;
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|e| CliError::Usage(format!("--{key} item {s:?}: {e}"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KEYS: &[KeySpec] = &[value("n", "304", ""), optional("seed", ""), output("out", "")];

    #[test]
    fn precedence_and_unknown_keys() {
        let file = parse_kv("# comment\n n = 424 \nseed=3 # trailing\n\n").unwrap();
        let mut flags = BTreeMap::new();
        flags.insert("seed".to_string(), "9".to_string());
        let r = resolve(KEYS, &file, &flags).unwrap();
        assert_eq!(r["n"], "424");
        assert_eq!(r["seed"], "9");
        assert!(!r.contains_key("out"));
        let r = resolve(KEYS, &BTreeMap::new(), &BTreeMap::new()).unwrap();
        assert_eq!(r["n"], "304");
        let bad = parse_kv("bogus = 1").unwrap();
        assert!(matches!(resolve(KEYS, &bad, &BTreeMap::new()), Err(CliError::Usage(_))));
        assert!(parse_kv("no equals sign").is_err());
    }

    #[test]
    fn typed_access() {
        let file = parse_kv("n = 12\nseed = x\nout = 1.5, 2.48,").unwrap();
        let r = resolve(KEYS, &file, &BTreeMap::new()).unwrap();
        let p = Params::new(&r);
        assert_eq!(p.get::<usize>("n").unwrap(), 12);
        assert!(p.get::<u64>("seed").is_err());
        assert_eq!(p.list::<f64>("out").unwrap(), vec![1.5, 2.48]);
        assert_eq!(p.opt::<u64>("missing").unwrap(), None);
    }
}

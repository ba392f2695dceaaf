//! Flat `key=value` run configuration merged with command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Resolved settings for one command: flag values override file values.
#[derive(Debug, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

/// Parses a config file body. Blank lines and `#` comments are skipped.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got {raw:?}", i + 1)))?;
        let key = k.trim().replace('_', "-");
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("config line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Merges `file` (if any) and `flags`; keys outside `allowed` in the
    /// file are rejected.
    pub fn resolve(
        file: Option<&Path>,
        allowed: &[&str],
        flags: Vec<(&str, Option<String>)>,
    ) -> Result<Self, CliError> {
        let mut values = match file {
            None => BTreeMap::new(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_file(&text)?
            }
        };
        if let Some(bad) = values.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(CliError::Usage(format!(
                "unknown config key {bad:?} (accepted: {})",
                allowed.join(", ")
            )));
        }
        for (k, v) in flags {
            debug_assert!(allowed.contains(&k), "flag {k} missing from the accepted keys");
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        Ok(Self { values })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::Usage(format!("bad value for {key}: {v:?}: {e}"))),
        }
    }

    pub fn opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Usage(format!("bad value for {key}: {v:?}: {e}")))
            })
            .transpose()
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        self.get(key, false)
    }

    /// Comma-separated list, or `default` when absent.
    pub fn list<T: FromStr + Clone>(&self, key: &str, default: T) -> Result<Vec<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(vec![default]),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|e| CliError::Usage(format!("bad value in {key}: {s:?}: {e}")))
                })
                .collect(),
        }
    }

    /// `--out`, else `TSA_OUT_DIR`, else `tsa-out`.
    pub fn out_dir(&self) -> PathBuf {
        self.raw("out")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("TSA_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("tsa-out"))
    }
}

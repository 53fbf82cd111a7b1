//! Key=value config files. Every long flag can also be supplied from a file
//! given with `--config`; explicit flags win, file entries fill the gaps, and
//! built-in defaults cover the rest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Keys a config file may set, mirroring the long flag names.
const KNOWN_KEYS: &[&str] = &[
    "arch",
    "arch-file",
    "scale",
    "dataset",
    "data-root",
    "epochs",
    "batch-size",
    "lr",
    "optimizer",
    "seed",
    "val-count",
    "out",
    "log",
    "params",
    "lambda",
    "cells",
    "budget-epochs",
    "train-limit",
    "val-limit",
    "channels",
    "height",
    "width",
    "costs-file",
    "report",
    "model",
    "listen",
    "connect",
    "image",
    "index",
    "insecure-ot",
    "once",
    "sparsity",
];

/// Parsed config-file entries. Keys not listed in [`KNOWN_KEYS`] are
/// rejected up front so typos fail loudly instead of silently using a
/// default.
#[derive(Debug, Default)]
pub struct Overrides {
    entries: BTreeMap<String, String>,
}

impl Overrides {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::Usage(format!(
                    "{}:{}: unknown config key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::Usage(format!(
                    "{}:{}: duplicate config key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
        }
        Ok(Overrides { entries })
    }

    /// Parse the entry for `key`, if present.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                CliError::Usage(format!("config key {key} = {raw:?}: {e}"))
            }),
        }
    }

    /// Parse a boolean entry; accepts true/false/1/0/yes/no.
    pub fn get_flag(&self, key: &str) -> Result<bool, CliError> {
        match self.entries.get(key).map(String::as_str) {
            None => Ok(false),
            Some("true" | "1" | "yes") => Ok(true),
            Some("false" | "0" | "no") => Ok(false),
            Some(other) => Err(CliError::Usage(format!(
                "config key {key} = {other:?}: expected true or false"
            ))),
        }
    }
}

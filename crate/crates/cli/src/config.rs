//! Config resolution: built-in defaults, then the config file section for
//! the subcommand, then flags.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Bad invocation; maps to exit status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Parsed TOML config file: an optional top-level `seed` plus one table per
/// subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub path: Option<PathBuf>,
    pub seed: Option<u64>,
    sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>, known: &[&str]) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table =
            toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
        let mut out = Self {
            path: Some(path.to_path_buf()),
            ..Self::default()
        };
        for (key, value) in table {
            if key == "seed" {
                let seed = value
                    .as_integer()
                    .and_then(|s| u64::try_from(s).ok())
                    .with_context(|| {
                        format!("{}: `seed` must be a non-negative integer", path.display())
                    })?;
                out.seed = Some(seed);
            } else if known.contains(&key.as_str()) {
                if !value.is_table() {
                    anyhow::bail!("{}: `{key}` must be a table", path.display());
                }
                out.sections.insert(key, serde_json::to_value(value)?);
            } else {
                anyhow::bail!("{}: unknown key `{key}`", path.display());
            }
        }
        Ok(out)
    }

    /// Fails if `section` holds a key or value that `C` rejects.
    pub fn check<C>(&self, section: &str) -> Result<()>
    where
        C: Serialize + DeserializeOwned + Default,
    {
        self.resolve::<C, _>(section, &()).map(|_: C| ())
    }

    /// Defaults, overlaid by this file's `section`, overlaid by the
    /// non-null fields of `flags`.
    pub fn resolve<C, F>(&self, section: &str, flags: &F) -> Result<C>
    where
        C: Serialize + DeserializeOwned + Default,
        F: Serialize,
    {
        let mut merged = match serde_json::to_value(C::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config types are structs"),
        };
        if let Some(Value::Object(file)) = self.sections.get(section) {
            for (k, v) in file {
                merged.insert(k.clone(), v.clone());
            }
        }
        if let Value::Object(f) = serde_json::to_value(flags)? {
            for (k, v) in f {
                if !v.is_null() {
                    merged.insert(k, v);
                }
            }
        }
        serde_json::from_value(Value::Object(merged)).with_context(|| match &self.path {
            Some(p) => format!("invalid [{section}] configuration in {}", p.display()),
            None => format!("invalid {section} configuration"),
        })
    }
}

/// `value`, or a usage error naming the missing option.
pub fn required<T: Clone>(value: &Option<T>, name: &str) -> Result<T> {
    value
        .clone()
        .ok_or_else(|| usage(format!("--{name} is required (flag or config file)")))
}

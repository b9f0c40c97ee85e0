//! `key = value` settings with layered precedence: built-in defaults, then
//! the `ROBUST_MTL_SEED` fallback, then a config file, then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

use crate::CliError;

pub type Settings = BTreeMap<String, String>;

pub const SEED_ENV: &str = "ROBUST_MTL_SEED";

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
pub fn parse(text: &str, origin: &str) -> Result<Settings> {
    let mut out = Settings::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key = value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Usage(format!("{origin}:{}: empty key", n + 1)).into());
        }
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!("{origin}:{}: duplicate key {k:?}", n + 1)).into());
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Settings> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text, &path.display().to_string())
}

pub fn render(s: &Settings) -> String {
    s.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
}

/// Keys a command understands; `None` marks a required key.
pub type Schema = &'static [(&'static str, Option<&'static str>)];

pub struct Layers<'a> {
    pub file: Option<&'a Settings>,
    pub flags: &'a Settings,
    pub env_seed: Option<String>,
}

/// Merges the layers over the schema defaults. Unknown keys and missing
/// required keys are usage errors.
pub fn resolve(schema: Schema, layers: Layers<'_>) -> Result<Settings> {
    let known = |k: &str| schema.iter().any(|(name, _)| *name == k);
    let mut out: Settings = schema
        .iter()
        .filter_map(|(k, d)| d.map(|d| (k.to_string(), d.to_string())))
        .collect();
    if let Some(seed) = layers.env_seed {
        if known("seed") {
            seed.parse::<u64>()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
            out.insert("seed".into(), seed);
        }
    }
    for layer in layers.file.into_iter().chain(Some(layers.flags)) {
        for (k, v) in layer {
            if !known(k) {
                return Err(CliError::Usage(format!("unknown setting {k:?}")).into());
            }
            out.insert(k.clone(), v.clone());
        }
    }
    for (k, d) in schema {
        if d.is_none() && !out.contains_key(*k) {
            return Err(CliError::Usage(format!("missing required setting {k:?}")).into());
        }
    }
    Ok(out)
}

pub fn env_seed() -> Option<String> {
    std::env::var(SEED_ENV).ok().filter(|s| !s.is_empty())
}

pub fn get<'a>(s: &'a Settings, key: &str) -> Result<&'a str> {
    s.get(key)
        .map(String::as_str)
        .ok_or_else(|| CliError::Usage(format!("missing setting {key:?}")).into())
}

pub fn parse_value<T: FromStr>(s: &Settings, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let raw = get(s, key)?;
    raw.parse()
        .map_err(|e| CliError::Usage(format!("bad value {raw:?} for {key}: {e}")).into())
}

/// `None` for the literal `auto`.
pub fn parse_auto<T: FromStr>(s: &Settings, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if get(s, key)? == "auto" {
        Ok(None)
    } else {
        parse_value(s, key).map(Some)
    }
}

pub fn parse_list<T: FromStr>(s: &Settings, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let raw = get(s, key)?;
    raw.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("bad entry {p:?} in {key}: {e}")).into())
        })
        .collect()
}

/// Splits `key=value` from a `--set` flag.
pub fn parse_assignment(raw: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = raw.split_once('=').ok_or_else(|| format!("expected key=value, got {raw:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

//! Flat `key = value` config files and flag/file/env resolution.
//!
//! Precedence, highest first: explicit flag, config-file entry, the
//! `CARATE_SEED` environment variable (seed only), built-in default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use carate_core::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    entries: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidData(format!(
                    "config line {} is not `key = value`: `{raw}`",
                    lineno + 1
                )));
            };
            entries.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(FileConfig { entries })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }
}

/// Resolve one option: flag beats file beats default.
pub fn resolve<T>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(raw) = file.get(key) {
        return raw.parse::<T>().map_err(|e| {
            Error::InvalidArgument(format!("config key `{key}`: cannot parse `{raw}`: {e}"))
        });
    }
    Ok(default)
}

/// Seed resolution adds the `CARATE_SEED` env var as the lowest-
/// precedence source before the default.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig, default: u64) -> Result<u64> {
    if let Some(v) = flag {
        return Ok(v);
    }
    if let Some(raw) = file.get("seed") {
        return raw
            .parse::<u64>()
            .map_err(|e| Error::InvalidArgument(format!("config key `seed`: {e}")));
    }
    if let Ok(raw) = std::env::var("CARATE_SEED") {
        return raw
            .parse::<u64>()
            .map_err(|e| Error::InvalidArgument(format!("CARATE_SEED: {e}")));
    }
    Ok(default)
}

/// Inclusive `start:stop:step` grid of integers.
pub fn parse_usize_grid(text: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "grid must be start:stop:step, got `{text}`"
        )));
    }
    let start: usize = parts[0]
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("grid start: {e}")))?;
    let stop: usize = parts[1]
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("grid stop: {e}")))?;
    let step: usize = parts[2]
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("grid step: {e}")))?;
    if step == 0 {
        return Err(Error::InvalidArgument("grid step must be > 0".into()));
    }
    Ok((start..=stop).step_by(step).collect())
}

/// Inclusive `start:stop:step` grid of floats (endpoint included up to
/// a step-relative tolerance).
pub fn parse_f64_grid(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "grid must be start:stop:step, got `{text}`"
        )));
    }
    let start: f64 = parts[0]
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("grid start: {e}")))?;
    let stop: f64 = parts[1]
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("grid stop: {e}")))?;
    let step: f64 = parts[2]
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("grid step: {e}")))?;
    if step <= 0.0 || step.is_nan() {
        return Err(Error::InvalidArgument("grid step must be > 0".into()));
    }
    let mut grid = Vec::new();
    let mut i = 0u64;
    loop {
        let v = start + i as f64 * step;
        if v > stop + 1e-12 * step {
            break;
        }
        grid.push(v);
        i += 1;
    }
    Ok(grid)
}

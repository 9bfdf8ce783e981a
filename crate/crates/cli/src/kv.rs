//! `key = value` parameter files for fusion and training settings.

use anyhow::{bail, Context};
use std::collections::BTreeMap;
use std::path::Path;

pub fn read_kv_file(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading params file {}", path.display()))?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "params file {} line {}: expected `key = value`, found {:?}",
                path.display(),
                i + 1,
                raw
            );
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

pub fn parse<T: std::str::FromStr>(
    map: &BTreeMap<String, String>,
    key: &str,
    default: T,
) -> anyhow::Result<T> {
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| anyhow::anyhow!("params key {key}: cannot parse {raw:?}")),
    }
}

/// Rejects keys outside the accepted set so typos fail loudly.
pub fn check_known_keys(map: &BTreeMap<String, String>, known: &[&str]) -> anyhow::Result<()> {
    for key in map.keys() {
        if !known.contains(&key.as_str()) {
            bail!("unknown params key {key:?}; accepted keys: {}", known.join(", "));
        }
    }
    Ok(())
}

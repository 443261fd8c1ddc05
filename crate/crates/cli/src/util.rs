//! Small shared helpers: hashing, list parsing, report writing.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

/// sha256 hex digest of a file's contents.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {path:?}"))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(format!("{:x}", h.finalize()))
}

/// Hashes of every named input file, for report embedding.
pub fn input_hashes(inputs: &[(&str, &Path)]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (name, path) in inputs {
        out.insert(name.to_string(), file_hash(path)?);
    }
    Ok(out)
}

/// Parses a comma-separated list ("0.5,0.3,0.3").
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("bad list element {p:?}: {e}"))
        })
        .collect()
}

/// Pretty-prints a JSON report to a file.
pub fn write_report(path: &Path, report: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).with_context(|| format!("writing {path:?}"))?;
    Ok(())
}

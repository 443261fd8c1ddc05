//! Configuration resolution.
//!
//! Precedence, highest first: explicit CLI flags, then the `--config` JSON
//! file, then built-in defaults. The seed additionally falls back to the
//! `SEMINDEX_SEED` environment variable before the default.

use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

/// Flat JSON config file; every field optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub dim: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub heads: Option<usize>,
    pub recon_layers: Option<usize>,
    pub dropout: Option<f64>,
    pub id_len: Option<usize>,
    pub codebook_size: Option<usize>,
    pub codebook_sizes: Option<Vec<usize>>,
    pub max_len: Option<usize>,
    pub min_count: Option<usize>,
    pub hint_ratios: Option<Vec<f64>>,
    pub warmup_recon_epochs: Option<usize>,
    pub warmup_enc_epochs: Option<usize>,
    pub main_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub step_size: Option<f64>,
    pub weight_decay: Option<f64>,
    pub kmeans_iters: Option<usize>,
    pub kmeans_restarts: Option<usize>,
    pub beam: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {p:?}"))?;
                let cfg: FileConfig =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {p:?}"))?;
                Ok(cfg)
            }
        }
    }
}

/// Seed precedence: flag, config file, SEMINDEX_SEED, 42.
pub fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> u64 {
    flag.or(file.seed)
        .or_else(|| {
            std::env::var("SEMINDEX_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .unwrap_or(42)
}

pub fn pick<T: Clone>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

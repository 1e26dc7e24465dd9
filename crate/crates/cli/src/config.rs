//! `--config` files. Keys mirror the long flag names with `_` for `-`;
//! a flag given on the command line always wins.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use scan_core::{Result, ScanError};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub preset: Option<String>,

    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub ensemble: Option<Vec<PathBuf>>,
    pub split: Option<String>,
    pub folds: Option<usize>,
    pub json: Option<PathBuf>,

    pub concepts: Option<usize>,
    pub images: Option<usize>,
    pub regions: Option<usize>,
    pub captions_per_image: Option<usize>,
    pub noise: Option<f64>,
    pub raw_dim: Option<usize>,
    pub filler_fraction: Option<f64>,
    pub split_counts: Option<String>,

    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub decay_epoch: Option<usize>,
    pub decay_factor: Option<f64>,
    pub clip_norm: Option<f64>,
    pub margin: Option<f64>,
    pub loss: Option<String>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub encoder: Option<String>,

    pub direction: Option<String>,
    pub pooling: Option<String>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub max_regions: Option<usize>,
    pub sum_max: Option<bool>,

    pub features: Option<PathBuf>,
    pub image: Option<usize>,
    pub caption: Option<String>,
    pub trace: Option<bool>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ScanError::Config(format!("{}: {}", path.display(), e.message())))
    }
}

/// Parses an optional textual value with `FromStr`.
pub fn parse_opt<T: std::str::FromStr<Err = ScanError>>(s: Option<&str>) -> Result<Option<T>> {
    s.map(str::parse).transpose()
}

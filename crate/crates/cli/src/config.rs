use std::path::{Path, PathBuf};

use mscd::crf::FilterBackend;
use mscd::{Error, Result};
use serde::Deserialize;

/// Flat key/value file whose keys are the long flag names. Values given on
/// the command line win.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,

    pub size: Option<usize>,
    pub bands: Option<usize>,
    pub change_frac: Option<f64>,
    pub noise: Option<f64>,
    pub gain: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
    pub shape_min: Option<usize>,
    pub shape_max: Option<usize>,

    pub t1: Option<PathBuf>,
    pub t2: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub truth: Option<PathBuf>,

    pub patch_size: Option<usize>,
    pub neg_pos_ratio: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub max_steps_per_epoch: Option<usize>,
    pub patience: Option<usize>,
    pub val_fraction: Option<f64>,

    pub data: Option<Vec<PathBuf>>,
    pub tile_size: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub augment: Option<bool>,

    pub model: Option<PathBuf>,
    pub crf: Option<PathBuf>,
    pub prob: Option<PathBuf>,
    pub crf_config: Option<PathBuf>,
    pub grid: Option<String>,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub sigma_alpha: Option<f64>,
    pub sigma_beta: Option<f64>,
    pub sigma_gamma: Option<f64>,
    pub iterations: Option<usize>,
    pub backend: Option<FilterBackend>,

    pub pred: Option<PathBuf>,
    pub root: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }
}

/// Command-line value, else file value.
pub fn pick<T: Clone>(cli: &Option<T>, file: &Option<T>) -> Option<T> {
    cli.clone().or_else(|| file.clone())
}

pub fn required<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required (flag or config key)")))
}

//! Optional JSON configuration. Command-line flags take precedence.

use std::path::Path;

use adlens::loss::LossConfig;
use serde::Deserialize;

use crate::error::{AtPath, CliError, CliResult};

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub probe: ProbeSection,
    pub lens: LensSection,
    pub markers: MarkerSection,
    pub loss: Option<LossConfig>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub lambda: Option<f64>,
    pub train_frac: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensSection {
    pub threshold: Option<f64>,
    pub bins: Option<usize>,
    pub tol_mean: Option<f64>,
    pub tol_std: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkerSection {
    pub extended: Option<bool>,
}

impl Config {
    pub fn load(path: Option<&Path>) -> CliResult<Config> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: bad config: {e}", path.display())))
    }
}

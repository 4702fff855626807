//! Config and model file schemas. Model paths resolve relative to the
//! config file so experiment directories stay relocatable.

use mkit_core::expr::Expr;
use mkit_core::ibp::{DualityCase, SelfTestCase};
use mkit_core::localization::LocalizationSpec;
use mkit_core::noise::NoiseSpec;
use mkit_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use std::path::{Path, PathBuf};

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Model references inside a config are taken relative to the config's own
/// directory unless absolute.
pub fn resolve(config: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn single_empty_index() -> Vec<Vec<usize>> {
    vec![Vec::new()]
}

fn default_z_max() -> f64 {
    4.0
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub seed: u64,
    pub model: String,
    pub points: Vec<Vec<f64>>,
    /// Derivative multi-indices; each one sweeps the whole point grid.
    #[serde(default = "single_empty_index")]
    pub alphas: Vec<Vec<usize>>,
    pub n_samples: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityModel {
    pub noise: NoiseSpec,
    pub f: Vec<Expr>,
    #[serde(default)]
    pub localization: LocalizationSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IbpConfig {
    pub seed: u64,
    /// Battery file; the built-in battery runs when absent.
    #[serde(default)]
    pub model: Option<String>,
    pub n_samples: u64,
    #[serde(default = "default_z_max")]
    pub z_max: f64,
    /// Negative control: flip the log-density gradient so every weight
    /// carries the wrong sign.
    #[serde(default)]
    pub corrupt: bool,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryFile {
    #[serde(default)]
    pub battery: Vec<SelfTestCase>,
    #[serde(default)]
    pub duality: Vec<DualityCase>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EulerConfig {
    pub seed: u64,
    pub model: String,
    pub levels: Vec<u32>,
    pub ref_level: u32,
    pub n_density: u64,
    pub n_sobolev: u64,
    pub p: u32,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_cells: usize,
    pub epsilons: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpConfig {
    pub seed: u64,
    pub model: String,
    pub levels: Vec<u32>,
    pub t: f64,
    pub n_paths: u64,
    pub bins: usize,
    pub n_sobolev: u64,
    pub p: u32,
    pub epsilons: Vec<f64>,
    #[serde(default)]
    pub n_density: u64,
    #[serde(default)]
    pub grid_lo: f64,
    #[serde(default)]
    pub grid_hi: f64,
    #[serde(default)]
    pub grid_cells: usize,
    #[serde(default)]
    pub a_grid: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub seed: u64,
    /// Family file: a JSON list of labeled functionals with their noise.
    pub model: String,
    pub epsilons: Vec<f64>,
    pub n_samples: u64,
    /// Members entering the tail maximum; defaults to the last two.
    #[serde(default)]
    pub tail: Option<usize>,
}

pub fn require_samples(n: u64) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("n_samples = {n}, need at least 2")));
    }
    Ok(())
}

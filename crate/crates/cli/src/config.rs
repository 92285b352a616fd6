//! Run configuration: a single TOML file with flag overrides (flags win).
//! Unknown keys are rejected so manifests stay authoritative.

use std::path::{Path, PathBuf};

use climgp::inference::{Priors, SamplerConfig};
use climgp::spacetime::{DEFAULT_PERIOD, DEFAULT_SPACE_WEIGHT};
use climgp::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub sampler: Sampler,
    pub priors: Priors,
    pub prediction: Prediction,
    pub simulation: Simulation,
    pub validation: Validation,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Station CSV.
    pub data: Option<PathBuf>,
    /// Output directory; created if absent.
    pub output: Option<PathBuf>,
    /// Archive directory (written by `fit`, read elsewhere).
    pub archive: Option<PathBuf>,
    /// Grid CSV for `predict`.
    pub grid: Option<PathBuf>,
    /// Optional generative-truth JSON for `simulate`.
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tier: usize,
    pub m: usize,
    pub space_weight: f64,
    pub period: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { tier: 5, m: 15, space_weight: DEFAULT_SPACE_WEIGHT, period: DEFAULT_PERIOD }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Sampler {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub adapt_window: usize,
    pub store_latent: bool,
}

impl Default for Sampler {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Sampler {
            iterations: d.iterations,
            burn_in: d.burn_in,
            thin: d.thin,
            seed: d.seed,
            adapt_window: d.adapt_window,
            store_latent: d.store_latent,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Prediction {
    pub start_year: i32,
    pub n_months: usize,
    /// 0 uses every archived draw.
    pub draw_subsample: usize,
}

impl Default for Prediction {
    fn default() -> Self {
        Prediction { start_year: 2000, n_months: 24, draw_subsample: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Simulation {
    pub n_sites: usize,
    pub extent_km: f64,
    pub start_year: i32,
    pub n_months: usize,
    pub missing_rate: f64,
    /// Tier-5 ecoregion count, cycled over sites and nested two per
    /// tier-4 parent.
    pub n_ecoregions: usize,
}

impl Default for Simulation {
    fn default() -> Self {
        Simulation {
            n_sites: 12,
            extent_km: 100.0,
            start_year: 2000,
            n_months: 36,
            missing_rate: 0.05,
            n_ecoregions: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Validation {
    pub fraction: f64,
}

impl Default for Validation {
    fn default() -> Self {
        Validation { fraction: 0.10 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            iterations: self.sampler.iterations,
            burn_in: self.sampler.burn_in,
            thin: self.sampler.thin,
            m: self.model.m,
            tier: self.model.tier,
            seed: self.sampler.seed,
            space_weight: self.model.space_weight,
            period: self.model.period,
            adapt_window: self.sampler.adapt_window,
            fix_covariance: false,
            store_latent: self.sampler.store_latent,
            init: None,
        }
    }

    pub fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
        path.clone().ok_or_else(|| Error::Config(format!("no {what} path given (config or flag)")))
    }
}

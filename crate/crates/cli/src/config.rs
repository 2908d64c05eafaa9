//! Run configuration: one JSON file with a section per command.

use std::path::{Path, PathBuf};

use nngp_core::covariance::{CovarianceConfig, KernelFamily};
use nngp_core::eval::{HoldoutPlan, TransformMode};
use nngp_core::mcmc::{NngpConfig, SamplerConfig};
use nngp_core::model::PriorSpec;
use nngp_core::predict::PredictOptions;
use nngp_core::transform::{TransformSpec, DEFAULT_SHIFT};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::io::ImputeConfig;

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predict: Option<PredictConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluate: Option<EvaluateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnose: Option<DiagnoseConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Region {
    pub lat_min: f64,
    pub lat_max: f64,
    pub elev_max_km: f64,
}

impl Default for Region {
    fn default() -> Self {
        Self {
            lat_min: -88.0,
            lat_max: -66.0,
            elev_max_km: 4.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixConfig {
    pub prob_a: f64,
    pub obs_per_site: usize,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            prob_a: 0.7,
            obs_per_site: 1,
        }
    }
}

/// Generating parameters on the transformed scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthConfig {
    pub covariance: CovarianceConfig,
    pub beta: Vec<f64>,
    pub tau2: [f64; 3],
    pub theta: f64,
    /// Cross-covariance of the varying coefficients (row-major rows).
    pub v: Vec<Vec<f64>>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        let mut cov = CovarianceConfig::new(KernelFamily::NonSeparableSphere, 0.05);
        cov.rho2 = 1.0;
        cov.nu = 0.5;
        Self {
            covariance: cov,
            beta: vec![0.5, -0.4, 0.3, 0.1, -0.1, 0.05, 0.0],
            tau2: [0.05, 0.2, 0.6],
            theta: 0.5,
            v: (0..4)
                .map(|i| {
                    (0..4)
                        .map(|j| {
                            if i == j {
                                if i == 0 {
                                    0.5
                                } else {
                                    0.05
                                }
                            } else {
                                0.0
                            }
                        })
                        .collect()
                })
                .collect(),
        }
    }
}

fn default_m() -> usize {
    nngp_core::nngp::DEFAULT_NEIGHBORS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n_sites: usize,
    #[serde(default)]
    pub region: Region,
    #[serde(default)]
    pub mix: MixConfig,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default = "default_m")]
    pub m: usize,
    /// Back-transform applied to simulated values before writing; `None` writes them as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<TransformSpec>,
}

fn default_transform() -> TransformMode {
    TransformMode::BoxCox {
        shift: DEFAULT_SHIFT,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub data: PathBuf,
    pub covariance: CovarianceConfig,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub nngp: NngpConfig,
    #[serde(default = "default_transform")]
    pub transform: TransformMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum GridSource {
    /// CSV with `lat,lon,area_km2` and optional covariate columns.
    File { path: PathBuf },
    /// Polar stereographic grid south of `lat_cutoff`.
    Generate { spacing_km: f64, lat_cutoff: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictConfig {
    /// Directory written by `fit`.
    pub artifact: PathBuf,
    pub grid: GridSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impute: Option<ImputeConfig>,
    #[serde(default)]
    pub options: PredictOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub artifact: PathBuf,
    /// CSV with `lat,lon` and optional `elev_km`.
    pub candidates: PathBuf,
    pub grid: GridSource,
    pub n_select: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impute: Option<ImputeConfig>,
    #[serde(default)]
    pub options: PredictOptions,
}

fn default_spread() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ModelConfig {
    /// Predicts the held-out values themselves; a scoring sanity check.
    Oracle {
        name: String,
        #[serde(default = "default_spread")]
        spread: f64,
    },
    Nngp {
        name: String,
        covariance: CovarianceConfig,
        #[serde(default)]
        priors: PriorSpec,
        #[serde(default)]
        sampler: SamplerConfig,
        #[serde(default)]
        nngp: NngpConfig,
        #[serde(default)]
        predict: PredictOptions,
        #[serde(default = "default_transform")]
        transform: TransformMode,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    pub data: PathBuf,
    #[serde(default)]
    pub plan: HoldoutPlan,
    pub models: Vec<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub artifact: PathBuf,
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg =
            Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(f) = &mut self.fit {
            resolve(base, &mut f.data);
        }
        if let Some(p) = &mut self.predict {
            resolve(base, &mut p.artifact);
            if let GridSource::File { path } = &mut p.grid {
                resolve(base, path);
            }
        }
        if let Some(d) = &mut self.design {
            resolve(base, &mut d.artifact);
            resolve(base, &mut d.candidates);
            if let GridSource::File { path } = &mut d.grid {
                resolve(base, path);
            }
        }
        if let Some(e) = &mut self.evaluate {
            resolve(base, &mut e.data);
        }
        if let Some(d) = &mut self.diagnose {
            resolve(base, &mut d.artifact);
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the effective (seed-overridden, path-resolved) configuration.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn section<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref()
            .ok_or_else(|| CliError::Config(format!("config has no `{name}` section")))
    }
}

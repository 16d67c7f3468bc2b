//! The declarative run configuration: one JSON file per run, unknown keys
//! rejected, command-line flags overriding only top-level entries.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use resnet_lab_core::activation::{ActivationFamily, FamilyKind};
use resnet_lab_core::dataset::{self, Dataset, LabelRule, MeasuringFunction};
use resnet_lab_core::error::{Error, Result};
use resnet_lab_core::experiments::GradcheckConfig;
use resnet_lab_core::flow_driver::FlowConfig;
use resnet_lab_core::init::InitConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub family: FamilyConfig,
    /// Measuring function; defaults to `w = 1/sqrt(d)` per coordinate, `c = 0`.
    #[serde(default)]
    pub g: Option<GConfig>,
    #[serde(default)]
    pub init: InitConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub depth_sweep: Option<DepthSweepConfig>,
    #[serde(default)]
    pub width_sweep: Option<WidthSweepConfig>,
    #[serde(default)]
    pub zero_loss: Option<ZeroLossConfig>,
    #[serde(default)]
    pub gradcheck: Option<GradcheckConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)?;
        cfg.init.validate()?;
        Ok((cfg, bytes))
    }

    pub fn family(&self) -> Result<ActivationFamily> {
        ActivationFamily::new(self.family.kind, self.family.d, self.family.tau)
    }

    pub fn measuring(&self) -> Result<MeasuringFunction> {
        match &self.g {
            Some(gc) => MeasuringFunction::new(gc.w.clone(), gc.c),
            None => MeasuringFunction::normalized_sum(self.family.d),
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        self.dataset.build(self.seed, self.family.d)
    }

    pub fn flow(&self) -> Result<&FlowConfig> {
        self.flow
            .as_ref()
            .ok_or_else(|| Error::contract("config needs a flow section (key: flow)"))
    }

    pub fn model(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| Error::contract("config needs a model section (key: model)"))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub kind: FamilyKind,
    pub d: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GConfig {
    pub w: Vec<f64>,
    #[serde(default)]
    pub c: f64,
}

/// Either a CSV to load (`path`) or the generation parameters
/// (`n`, `radius`, `label_rule`, optional `seed` defaulting to the run seed).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub label_rule: Option<LabelRule>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DatasetConfig {
    pub fn build(&self, run_seed: u64, d: usize) -> Result<Dataset> {
        if let Some(path) = &self.path {
            let ds = dataset::load_csv(path)?;
            if ds.dim() != d {
                return Err(Error::contract(format!(
                    "dataset at {} has dimension {}, family.d is {d}",
                    path.display(),
                    ds.dim()
                )));
            }
            return Ok(ds);
        }
        match (self.n, self.radius, self.label_rule) {
            (Some(n), Some(radius), Some(rule)) => {
                dataset::generate(self.seed.unwrap_or(run_seed), n, d, radius, rule)
            }
            _ => Err(Error::contract(
                "dataset needs either dataset.path or all of dataset.n, dataset.radius, dataset.label_rule",
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layer count of the finite model (train-discrete only).
    #[serde(default)]
    pub layers: Option<usize>,
    pub width: usize,
    /// Depth-grid intervals of the continuum model (train-continuum only).
    #[serde(default)]
    pub n_t: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthSweepConfig {
    pub l_values: Vec<usize>,
    pub width: usize,
    #[serde(default)]
    pub n_t_ref: Option<usize>,
    #[serde(default = "default_depth_slope_lo")]
    pub slope_lo: f64,
    #[serde(default = "default_depth_slope_hi")]
    pub slope_hi: f64,
    #[serde(default = "default_depth_min_r2")]
    pub min_r2: f64,
}

fn default_depth_slope_lo() -> f64 {
    -1.5
}

fn default_depth_slope_hi() -> f64 {
    -0.7
}

fn default_depth_min_r2() -> f64 {
    0.9
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthSweepConfig {
    pub m_values: Vec<usize>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_width_n_t")]
    pub n_t: usize,
    #[serde(default)]
    pub m_ref: Option<usize>,
    #[serde(default = "default_width_slope_center")]
    pub slope_center: f64,
    #[serde(default = "default_width_slope_tol")]
    pub slope_tol: f64,
    #[serde(default = "default_width_min_r2")]
    pub min_r2: f64,
}

fn default_n_seeds() -> usize {
    20
}

fn default_width_n_t() -> usize {
    16
}

fn default_width_slope_center() -> f64 {
    -0.5
}

fn default_width_slope_tol() -> f64 {
    0.2
}

fn default_width_min_r2() -> f64 {
    0.7
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroLossConfig {
    #[serde(default = "default_zero_loss_width")]
    pub width: usize,
    #[serde(default = "default_zero_loss_n_t")]
    pub n_t: usize,
    #[serde(default = "default_zero_loss_threshold")]
    pub threshold: f64,
    #[serde(default = "default_monotone_after")]
    pub monotone_after: usize,
}

fn default_zero_loss_width() -> usize {
    32
}

fn default_zero_loss_n_t() -> usize {
    32
}

fn default_zero_loss_threshold() -> f64 {
    1e-2
}

fn default_monotone_after() -> usize {
    100
}

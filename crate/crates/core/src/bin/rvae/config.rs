use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rvae::analysis::{PolarSpec, ProbeSpec};
use rvae::datasets::farm::{FarmDatasetSpec, LayoutSpec};
use rvae::datasets::gp::GpDatasetSpec;
use rvae::datasets::TurbineSpec;
use rvae::presets::{farm_config, GpModel};
use rvae::rvae::RvaeConfig;
use rvae::training::{GpStream, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// A parsed configuration and the directory its relative paths resolve
/// against.
pub struct Loaded<T> {
    pub value: T,
    pub base: PathBuf,
}

impl<T> Loaded<T> {
    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

fn read<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => anyhow!("config not found: {}", path.display()),
        _ => anyhow!("cannot read config {}: {e}", path.display()),
    })?;
    let value = serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    Ok(Loaded { value, base })
}

pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<Loaded<T>> {
    match path {
        Some(p) => read(p),
        None => Ok(Loaded {
            value: T::default(),
            base: PathBuf::from("."),
        }),
    }
}

pub fn load_required<T: DeserializeOwned>(path: Option<&Path>) -> Result<Loaded<T>> {
    match path {
        Some(p) => read(p),
        None => bail!("this command needs --config"),
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateGp {
    pub seed: u64,
    pub dataset: GpDatasetSpec,
}

fn default_layout() -> LayoutSpec {
    LayoutSpec::with_seed(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateFarm {
    /// Seed of the inflow draws; the layout has its own.
    pub seed: u64,
    pub layout: LayoutSpec,
    pub turbine: TurbineSpec,
    pub dataset: FarmDatasetSpec,
}

impl Default for GenerateFarm {
    fn default() -> Self {
        Self {
            seed: 0,
            layout: default_layout(),
            turbine: TurbineSpec::default(),
            dataset: FarmDatasetSpec::default(),
        }
    }
}

/// A named configuration or a full architecture description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(Preset),
    Full(RvaeConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    Farm { steps: usize, width: usize, latent: usize },
    Gp { model: GpModel, width: usize, latent: usize },
}

impl ModelSpec {
    /// The architecture; `global_conditioning` applies to farm presets.
    pub fn resolve(&self, global_conditioning: bool) -> RvaeConfig {
        match self {
            Self::Full(c) => c.clone(),
            Self::Preset(Preset::Farm { steps, width, latent }) => farm_config(*steps, *width, *latent, global_conditioning),
            Self::Preset(Preset::Gp { model, width, latent }) => model.config(*width, *latent),
        }
    }
}

fn np_train() -> TrainConfig {
    TrainConfig::neural_process()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrainJob {
    /// Masked-node training on the training split of a stored farm dataset.
    Farm {
        dataset: PathBuf,
        model: ModelSpec,
        #[serde(default)]
        train: TrainConfig,
    },
    /// Meta-learning on fresh GP tasks, scored on a stored task set.
    Gp {
        model: ModelSpec,
        #[serde(default = "np_train")]
        train: TrainConfig,
        stream: GpStream,
        test: PathBuf,
    },
}

impl TrainJob {
    pub fn train_mut(&mut self) -> &mut TrainConfig {
        match self {
            Self::Farm { train, .. } | Self::Gp { train, .. } => train,
        }
    }
}

/// Held-out graphs: the test split of a farm dataset or a stored GP task set.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Farm {
        dataset: PathBuf,
    },
    Gp {
        dataset: PathBuf,
        /// Edge cutoff; defaults to the one stored with the tasks.
        #[serde(default)]
        cutoff: Option<f64>,
    },
}

/// Settings shared by the commands that read a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Analysis {
    pub seed: u64,
    pub data: Option<DataSpec>,
    /// Fraction of farm nodes masked per graph.
    pub mask_fraction: f64,
    pub mc_samples: usize,
    /// Node state channel scored by MAPE and sensitivity.
    pub channel: usize,
    /// Graph of the held-out set used by sensitivity.
    pub graph: usize,
    /// Sensitivity target; the first masked node when absent.
    pub target: Option<usize>,
    /// Number of held-out graphs imputed; all when absent.
    pub limit: Option<usize>,
    /// Sample latents instead of taking their means.
    pub sample: bool,
    pub polar: PolarSpec,
    pub probe: ProbeSpec,
}

impl Default for Analysis {
    fn default() -> Self {
        Self {
            seed: 0,
            data: None,
            mask_fraction: 0.2,
            mc_samples: 16,
            channel: 0,
            graph: 0,
            target: None,
            limit: None,
            sample: false,
            polar: PolarSpec::default(),
            probe: ProbeSpec::default(),
        }
    }
}

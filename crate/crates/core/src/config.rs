//! Run configuration, read from TOML-compatible documents via serde.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::datakit::{SplitSpec, SyntheticConfig};
use crate::diffusion::DiffusionParams;
use crate::error::{Error, Result};
use crate::features::FeatureLayout;
use crate::geo_graph::{BBox, GridSpec};
use crate::objectives::{ContrastiveConfig, LambdaSchedule};
use crate::trainer::TrainConfig;

/// Where observations come from. Exactly one source must be given.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    /// Neighbours per node in the base graph.
    pub k: usize,
    /// Replace the diffusion operator by the row-normalized base graph.
    pub no_diffusion: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 3, no_diffusion: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Step between evaluated anchors.
    pub stride: usize,
    /// Neighbours used by every baseline.
    pub baseline_k: usize,
    pub ridge: f64,
    /// Step between anchors of the AR/LR training pairs.
    pub baseline_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stride: 1, baseline_k: 3, ridge: crate::baselines::DEFAULT_RIDGE, baseline_stride: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub grid: GridSpec,
    /// Withheld stations. Defaults to the generator's choice for synthetic
    /// data and to no withheld stations otherwise.
    pub split: Option<SplitSpec>,
    pub graph: GraphConfig,
    pub diffusion: DiffusionParams,
    pub features: FeatureLayout,
    pub contrastive: ContrastiveConfig,
    pub lambda: LambdaSchedule,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Bounding box of the Dutch station network.
pub fn default_grid() -> GridSpec {
    GridSpec {
        bbox: BBox { lat_min: 50.75, lat_max: 53.55, lon_min: 3.35, lon_max: 7.25 },
        rows: 9,
        cols: 9,
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            grid: default_grid(),
            split: None,
            graph: GraphConfig::default(),
            diffusion: DiffusionParams::default(),
            features: FeatureLayout::default(),
            contrastive: ContrastiveConfig::default(),
            lambda: LambdaSchedule::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => return Err(Error::Config("give either data.csv or data.synthetic, not both".into())),
            (None, None) => return Err(Error::Config("no data source: set data.csv or data.synthetic".into())),
            (None, Some(s)) => s.validate()?,
            _ => {}
        }
        self.grid.validate()?;
        if self.graph.k == 0 {
            return Err(Error::Config("graph.k must be at least 1".into()));
        }
        self.diffusion.validate()?;
        self.features.validate()?;
        self.contrastive.validate()?;
        if self.contrastive.offset > self.features.t_out {
            return Err(Error::Config("contrastive.offset must not exceed features.t_out".into()));
        }
        self.lambda.validate()?;
        self.train.validate()?;
        if self.eval.stride == 0 || self.eval.baseline_stride == 0 || self.eval.baseline_k == 0 {
            return Err(Error::Config("eval strides and baseline_k must be at least 1".into()));
        }
        if !(self.eval.ridge >= 0.0) {
            return Err(Error::Config("eval.ridge must be non-negative".into()));
        }
        Ok(())
    }
}

//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelData};
use crate::diffusion::DiffusionParams;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::features::{FeatureLayout, NormStats};
use crate::numerics::ParamStore;
use crate::objectives::ContrastiveConfig;

pub const CHECKPOINT_FORMAT: &str = "contravirt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub method: String,
    pub seed: u64,
    pub layout: FeatureLayout,
    pub diffusion: DiffusionParams,
    pub no_diffusion: bool,
    pub contrastive: ContrastiveConfig,
    pub stats: NormStats,
    /// Origin of every node, in node order.
    pub nodes: Vec<String>,
    pub encoder: Encoder,
    pub params: ParamStore<f64>,
}

pub struct CheckpointMeta<'a> {
    pub method: &'a str,
    pub seed: u64,
    pub diffusion: DiffusionParams,
    pub no_diffusion: bool,
    pub contrastive: &'a ContrastiveConfig,
}

impl Checkpoint {
    pub fn new(model: &Model, data: &ModelData, meta: CheckpointMeta<'_>) -> Self {
        let mut params = model.params.clone();
        params.zero_grad();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            method: meta.method.into(),
            seed: meta.seed,
            layout: data.store.layout,
            diffusion: meta.diffusion,
            no_diffusion: meta.no_diffusion,
            contrastive: meta.contrastive.clone(),
            stats: data.stats.clone(),
            nodes: data.signature(),
            encoder: model.encoder,
            params,
        }
    }

    pub fn model(&self) -> Model {
        Model { encoder: self.encoder, params: self.params.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let h: Header = serde_json::from_str(s)?;
        if h.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("not a checkpoint (format {:?})", h.format)));
        }
        if h.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", h.version)));
        }
        let c: Self = serde_json::from_str(s)?;
        c.check_shapes()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn check_shapes(&self) -> Result<()> {
        let mut fresh = ParamStore::<f64>::new();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        Encoder::init(&mut fresh, self.layout, self.encoder.embed_dim, self.encoder.n_virtual, &mut rng)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Data("checkpoint parameter count does not match its encoder".into()));
        }
        for (a, b) in fresh.iter().zip(self.params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || b.value.len() != b.value.rows() * b.value.cols() {
                return Err(Error::Data(format!("checkpoint parameter {} has the wrong shape", b.name)));
            }
        }
        if self.encoder.layout != self.layout {
            return Err(Error::Data("checkpoint encoder layout differs from its feature layout".into()));
        }
        Ok(())
    }

    /// Fails unless `data` was built with the same nodes, layout and
    /// normalization as this checkpoint.
    pub fn check_compatible(&self, data: &ModelData) -> Result<()> {
        if self.layout != data.store.layout {
            return Err(Error::Contract("feature layout differs from checkpoint".into()));
        }
        if self.nodes != data.signature() {
            return Err(Error::Contract("node set differs from checkpoint".into()));
        }
        if self.stats != data.stats {
            return Err(Error::Contract("normalization statistics differ from checkpoint".into()));
        }
        Ok(())
    }
}

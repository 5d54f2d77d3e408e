//! JSON checkpoint container for encoders and feature-fusion pipelines.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::Provenance;
use crate::encoders::EncoderModel;
use crate::error::{Error, Result};
use crate::fusion::FeatureFusionModel;
use crate::io::{read_json, write_json};

pub const CHECKPOINT_FORMAT: &str = "m2fusion-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "model", rename_all = "snake_case")]
pub enum CheckpointModel {
    Encoder(EncoderModel),
    Fusion(FeatureFusionModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    /// `affine`, `conv2.5d`, `transformer` or `mlp`.
    pub arch: String,
    pub dim: usize,
    pub seed: u64,
    pub provenance: Provenance,
    #[serde(flatten)]
    pub model: CheckpointModel,
}

impl Checkpoint {
    pub fn encoder(model: &EncoderModel) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            arch: model.net.arch_tag().into(),
            dim: model.dim,
            seed: model.seed,
            provenance: model.provenance.clone(),
            model: CheckpointModel::Encoder(model.clone()),
        }
    }

    pub fn fusion(model: &FeatureFusionModel, seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            arch: model.fusion.kind().name().into(),
            dim: model.dim,
            seed,
            provenance: model.provenance.clone(),
            model: CheckpointModel::Fusion(model.clone()),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    /// Loads a checkpoint and rejects it unless its width equals `dim`.
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                location: "field 'format'".into(),
                message: format!("unsupported checkpoint format '{}'", c.format),
            });
        }
        let inner = match &c.model {
            CheckpointModel::Encoder(m) => m.dim,
            CheckpointModel::Fusion(m) => m.dim,
        };
        if c.dim != dim || inner != dim {
            return Err(Error::dim(format!("checkpoint {}", path.display()), dim, c.dim));
        }
        Ok(c)
    }

    pub fn into_encoder(self) -> Result<EncoderModel> {
        match self.model {
            CheckpointModel::Encoder(m) => Ok(m),
            CheckpointModel::Fusion(_) => Err(Error::Config("checkpoint holds a fusion model, not an encoder".into())),
        }
    }

    pub fn into_fusion(self) -> Result<FeatureFusionModel> {
        match self.model {
            CheckpointModel::Fusion(m) => Ok(m),
            CheckpointModel::Encoder(_) => Err(Error::Config("checkpoint holds an encoder, not a fusion model".into())),
        }
    }
}

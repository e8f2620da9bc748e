//! JSON checkpoint container.
//!
//! Stores the head parameters, the model spec, the backbone checksum and the
//! training record. Backbone weights are not stored: loading re-fetches them
//! from the provider and refuses to continue if the checksum differs.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{AdaptedModel, BackboneProvider, LinearHead, ModelSpec};
use crate::error::{Error, Result};
use crate::train::{TrainConfig, TrainHistory};

pub const CHECKPOINT_FORMAT: &str = "leafvote-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major out_dim × in_dim.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub spec: ModelSpec,
    pub provider: String,
    pub backbone_checksum: String,
    pub head_seed: u64,
    pub head: HeadParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<TrainHistory>,
}

impl Checkpoint {
    pub fn from_model(model: &AdaptedModel, train_config: Option<TrainConfig>, history: Option<TrainHistory>) -> Self {
        let head = model.head();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: *model.spec(),
            provider: model.provider().to_string(),
            backbone_checksum: model.backbone_checksum().to_string(),
            head_seed: model.head_seed(),
            head: HeadParams {
                in_dim: head.in_dim(),
                out_dim: head.out_dim(),
                weights: head.weights().iter().copied().collect(),
                bias: head.bias().to_vec(),
            },
            train_config,
            history,
        }
    }

    /// Rebuilds the model, verifying the provider's backbone against the stored checksum.
    pub fn restore(&self, provider: &dyn BackboneProvider) -> Result<AdaptedModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::ProviderError(format!("unsupported checkpoint format `{}`", self.format)));
        }
        if provider.name() != self.provider {
            return Err(Error::ProviderError(format!(
                "checkpoint was built with provider `{}`, got `{}`",
                self.provider,
                provider.name()
            )));
        }
        self.spec.validate()?;
        let backbone = provider.load(self.spec.arch, self.spec.pretrained)?;
        let actual = backbone.checksum();
        if actual != self.backbone_checksum {
            return Err(Error::ChecksumMismatch {
                expected: self.backbone_checksum.clone(),
                actual,
            });
        }
        let h = &self.head;
        if h.in_dim != backbone.feature_dim() || h.out_dim != self.spec.num_classes || h.bias.len() != h.out_dim {
            return Err(Error::BadModelSpec("head shape does not match spec and backbone".into()));
        }
        let weights = Array2::from_shape_vec((h.out_dim, h.in_dim), h.weights.clone())
            .map_err(|e| Error::BadModelSpec(e.to_string()))?;
        let head = LinearHead::from_params(weights, Array1::from(h.bias.clone()));
        Ok(AdaptedModel::from_parts(self.spec, provider.name(), backbone, head, self.head_seed))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Arch, RandomBackboneProvider};

    #[test]
    fn roundtrip_and_checksum_verification() {
        let provider = RandomBackboneProvider::default();
        let model = build_model(ModelSpec::new(Arch::EfficientNetB0, 4), &provider, 11).unwrap();
        let ckpt = Checkpoint::from_model(&model, Some(TrainConfig::default()), None);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ckpt.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.restore(&provider).unwrap();
        assert_eq!(restored.head(), model.head());
        assert_eq!(restored.backbone_checksum(), model.backbone_checksum());

        let other = RandomBackboneProvider { seed: 5 };
        assert!(matches!(back.restore(&other), Err(Error::ChecksumMismatch { .. })));
    }
}

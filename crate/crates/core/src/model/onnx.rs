//! Pretrained backbones exported to ONNX.
//!
//! The provider directory holds one headless network per architecture,
//! `<tag>.onnx` (for example `resnet50.onnx`), taking a 1×3×224×224 input and
//! producing the pooled feature vector (1×D or 1×D×1×1). The checksum is the
//! SHA-256 of the model file.

use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array1, ArrayView3};
use tract_onnx::prelude::*;

use super::{Arch, ArchDefinition, Backbone, BackboneProvider};
use crate::error::{Error, Result};
use crate::hashing::sha256_hex;

type Plan = Arc<TypedSimplePlan>;

pub struct OnnxBackboneProvider {
    dir: PathBuf,
}

impl OnnxBackboneProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl BackboneProvider for OnnxBackboneProvider {
    fn name(&self) -> &str {
        "onnx"
    }

    fn load(&self, arch: Arch, pretrained: bool) -> Result<Arc<dyn Backbone>> {
        if !pretrained {
            return Err(Error::ProviderError("onnx provider only serves pretrained weights".into()));
        }
        let path = self.dir.join(format!("{}.onnx", arch.tag()));
        let bytes = std::fs::read(&path).map_err(|e| Error::ProviderError(format!("{}: {e}", path.display())))?;
        let def = ArchDefinition::of(arch);
        let (h, w) = def.input_size;
        let plan = tract_onnx::onnx()
            .model_for_read(&mut bytes.as_slice())
            .and_then(|m| m.with_input_fact(0, f32::fact([1, 3, h, w]).into()))
            .and_then(|m| m.into_optimized())
            .and_then(|m| m.into_runnable())
            .map_err(|e| Error::ProviderError(format!("{}: {e}", path.display())))?;
        Ok(Arc::new(OnnxBackbone {
            def,
            plan,
            checksum: sha256_hex(&bytes),
        }))
    }
}

struct OnnxBackbone {
    def: ArchDefinition,
    plan: Plan,
    checksum: String,
}

impl std::fmt::Debug for OnnxBackbone {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OnnxBackbone").field("arch", &self.def.arch).finish()
    }
}

impl Backbone for OnnxBackbone {
    fn arch(&self) -> Arch {
        self.def.arch
    }

    fn feature_dim(&self) -> usize {
        self.def.feature_dim
    }

    fn input_size(&self) -> (usize, usize) {
        self.def.input_size
    }

    fn features(&self, image: ArrayView3<f32>) -> Result<Array1<f32>> {
        let (h, w) = self.def.input_size;
        if image.dim() != (3, h, w) {
            return Err(Error::BadBatch(format!("expected 3×{h}×{w} input, got {:?}", image.dim())));
        }
        let data: Vec<f32> = image.iter().copied().collect();
        let input = Tensor::from_shape(&[1, 3, h, w], &data).map_err(|e| Error::ProviderError(e.to_string()))?;
        let out = self
            .plan
            .run(tvec!(input.into()))
            .map_err(|e| Error::ProviderError(e.to_string()))?;
        let view = out[0].to_plain_array_view::<f32>().map_err(|e| Error::ProviderError(e.to_string()))?;
        let flat: Vec<f32> = view.iter().copied().collect();
        if flat.len() != self.def.feature_dim {
            return Err(Error::ProviderError(format!(
                "backbone produced {} features, expected {}",
                flat.len(),
                self.def.feature_dim
            )));
        }
        Ok(Array1::from(flat))
    }

    fn checksum(&self) -> String {
        self.checksum.clone()
    }
}

//! Frozen backbones with a replaceable linear classification head.
//!
//! A backbone comes from a [`BackboneProvider`] and is only reachable through
//! the read-only [`Backbone`] trait, so nothing in the training path can
//! mutate it. The head is the only trainable part of an [`AdaptedModel`].

mod checkpoint;
mod head;
#[cfg(feature = "onnx")]
mod onnx;
mod provider;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, HeadParams, CHECKPOINT_FORMAT};
pub use head::{softmax, LinearHead};
#[cfg(feature = "onnx")]
pub use onnx::OnnxBackboneProvider;
pub use provider::{
    provider_by_name, ArchDefinition, Backbone, BackboneProvider, RandomBackbone, RandomBackboneProvider,
    PROVIDER_CACHE_ENV,
};

use crate::error::{Error, Result};
use crate::par::Exec;

/// Default seed for head initialization.
pub const DEFAULT_HEAD_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "resnet50")]
    ResNet50,
    #[serde(rename = "efficientnet_b0")]
    EfficientNetB0,
    #[serde(rename = "densenet121")]
    DenseNet121,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::ResNet50, Arch::EfficientNetB0, Arch::DenseNet121];

    /// Short identifier used for tags, file names and the CLI.
    pub fn tag(self) -> &'static str {
        match self {
            Arch::ResNet50 => "resnet50",
            Arch::EfficientNetB0 => "efficientnet_b0",
            Arch::DenseNet121 => "densenet121",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Arch::ResNet50 => "ResNet50",
            Arch::EfficientNetB0 => "EfficientNet-B0",
            Arch::DenseNet121 => "DenseNet121",
        }
    }

    pub fn definition(self) -> ArchDefinition {
        ArchDefinition::of(self)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        match norm.as_str() {
            "resnet50" => Ok(Arch::ResNet50),
            "efficientnetb0" => Ok(Arch::EfficientNetB0),
            "densenet121" => Ok(Arch::DenseNet121),
            _ => Err(Error::UnknownArch(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub num_classes: usize,
    pub pretrained: bool,
}

impl ModelSpec {
    pub fn new(arch: Arch, num_classes: usize) -> Self {
        Self {
            arch,
            num_classes,
            pretrained: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::BadModelSpec(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }
}

/// A frozen backbone plus a trainable C-way linear head.
#[derive(Clone)]
pub struct AdaptedModel {
    spec: ModelSpec,
    provider: String,
    backbone: Arc<dyn Backbone>,
    backbone_checksum: String,
    head_seed: u64,
    pub(crate) head: LinearHead,
}

impl fmt::Debug for AdaptedModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AdaptedModel")
            .field("spec", &self.spec)
            .field("provider", &self.provider)
            .field("backbone_checksum", &self.backbone_checksum)
            .field("head", &(self.head.in_dim(), self.head.out_dim()))
            .finish()
    }
}

/// Fetches the backbone for `spec` and attaches a head initialized from `head_seed`.
pub fn build_model(spec: ModelSpec, provider: &dyn BackboneProvider, head_seed: u64) -> Result<AdaptedModel> {
    spec.validate()?;
    let backbone = provider.load(spec.arch, spec.pretrained)?;
    let head = LinearHead::init(backbone.feature_dim(), spec.num_classes, head_seed);
    Ok(AdaptedModel::from_parts(spec, provider.name(), backbone, head, head_seed))
}

impl AdaptedModel {
    pub(crate) fn from_parts(
        spec: ModelSpec,
        provider: &str,
        backbone: Arc<dyn Backbone>,
        head: LinearHead,
        head_seed: u64,
    ) -> Self {
        let backbone_checksum = backbone.checksum();
        Self {
            spec,
            provider: provider.to_string(),
            backbone,
            backbone_checksum,
            head_seed,
            head,
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tag(&self) -> &'static str {
        self.spec.arch.tag()
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    /// Checksum recorded when the model was built.
    pub fn backbone_checksum(&self) -> &str {
        &self.backbone_checksum
    }

    pub fn head(&self) -> &LinearHead {
        &self.head
    }

    pub fn head_seed(&self) -> u64 {
        self.head_seed
    }

    pub fn backbone_trainable(&self) -> bool {
        false
    }

    fn check_batch(&self, batch: &ArrayView4<f32>) -> Result<()> {
        let (h, w) = self.backbone.input_size();
        let (_, c, bh, bw) = batch.dim();
        if (c, bh, bw) != (3, h, w) {
            return Err(Error::BadBatch(format!("expected B×3×{h}×{w}, got {:?}", batch.dim())));
        }
        Ok(())
    }

    /// Frozen features for one preprocessed 3×H×W image.
    pub fn features(&self, image: ArrayView3<f32>) -> Result<ndarray::Array1<f32>> {
        self.backbone.features(image)
    }

    /// B×D frozen features for a preprocessed batch.
    pub fn features_batch(&self, batch: ArrayView4<f32>, exec: Exec) -> Result<Array2<f32>> {
        self.check_batch(&batch)?;
        let images: Vec<ArrayView3<f32>> = batch.axis_iter(Axis(0)).collect();
        let rows = exec.try_map(&images, |img| self.backbone.features(img.view()))?;
        let dim = self.backbone.feature_dim();
        let mut out = Array2::<f32>::zeros((rows.len(), dim));
        for (mut slot, row) in out.axis_iter_mut(Axis(0)).zip(&rows) {
            slot.assign(row);
        }
        Ok(out)
    }

    /// Softmax class probabilities from precomputed features.
    pub fn probs_from_features(&self, features: ArrayView2<f32>) -> Result<Array2<f64>> {
        if features.ncols() != self.head.in_dim() {
            return Err(Error::BadBatch(format!(
                "expected {} features per row, got {}",
                self.head.in_dim(),
                features.ncols()
            )));
        }
        let mut logits = self.head.logits(features);
        for mut row in logits.axis_iter_mut(Axis(0)) {
            softmax(row.as_slice_mut().expect("row-major logits"));
        }
        Ok(logits)
    }

    /// B×C probability rows for a preprocessed B×3×224×224 batch.
    pub fn forward_probs(&self, batch: ArrayView4<f32>) -> Result<Array2<f64>> {
        self.forward_probs_with(batch, Exec::default())
    }

    pub fn forward_probs_with(&self, batch: ArrayView4<f32>, exec: Exec) -> Result<Array2<f64>> {
        let features = self.features_batch(batch, exec)?;
        let probs = self.probs_from_features(features.view())?;
        self.backbone.synchronize();
        Ok(probs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_batch(b: usize) -> Array4<f32> {
        Array4::from_shape_fn((b, 3, 224, 224), |(i, c, y, x)| {
            (((i * 7 + c * 13 + y * 3 + x) % 17) as f32 / 8.0) - 1.0
        })
    }

    #[test]
    fn head_shapes_follow_arch_definition() {
        let provider = RandomBackboneProvider::default();
        for (arch, dim) in [(Arch::ResNet50, 2048), (Arch::EfficientNetB0, 1280), (Arch::DenseNet121, 1024)] {
            assert_eq!(arch.definition().feature_dim, dim);
            let m = build_model(ModelSpec::new(arch, 15), &provider, 42).unwrap();
            assert_eq!((m.head().in_dim(), m.head().out_dim()), (dim, 15));
            assert!(!m.backbone_trainable());
        }
        let m = build_model(ModelSpec::new(Arch::DenseNet121, 2), &provider, 1).unwrap();
        assert_eq!(m.head().out_dim(), 2);
        assert!(matches!(
            build_model(ModelSpec::new(Arch::DenseNet121, 1), &provider, 1),
            Err(Error::BadModelSpec(_))
        ));
    }

    #[test]
    fn head_init_is_seeded() {
        let provider = RandomBackboneProvider::default();
        let a = build_model(ModelSpec::new(Arch::ResNet50, 15), &provider, 42).unwrap();
        let b = build_model(ModelSpec::new(Arch::ResNet50, 15), &provider, 42).unwrap();
        let c = build_model(ModelSpec::new(Arch::ResNet50, 15), &provider, 43).unwrap();
        assert_eq!(a.head(), b.head());
        assert_ne!(a.head(), c.head());
        assert_eq!(a.backbone_checksum(), c.backbone_checksum());
    }

    #[test]
    fn forward_rows_are_distributions() {
        let provider = RandomBackboneProvider::default();
        let m = build_model(ModelSpec::new(Arch::EfficientNetB0, 15), &provider, 42).unwrap();
        let probs = m.forward_probs(small_batch(3).view()).unwrap();
        assert_eq!(probs.dim(), (3, 15));
        for row in probs.rows() {
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let seq = m.forward_probs_with(small_batch(3).view(), Exec::Sequential).unwrap();
        assert_eq!(seq, probs);
    }

    #[test]
    fn zero_head_is_uniform() {
        let provider = RandomBackboneProvider::default();
        let mut m = build_model(ModelSpec::new(Arch::DenseNet121, 15), &provider, 42).unwrap();
        m.head.weights.fill(0.0);
        m.head.bias.fill(0.0);
        let probs = m.forward_probs(small_batch(2).view()).unwrap();
        assert!(probs.iter().all(|p| (p - 1.0 / 15.0).abs() < 1e-12));
    }

    #[test]
    fn rejects_wrong_shape() {
        let provider = RandomBackboneProvider::default();
        let m = build_model(ModelSpec::new(Arch::ResNet50, 3), &provider, 42).unwrap();
        let bad = Array4::<f32>::zeros((1, 3, 100, 100));
        assert!(matches!(m.forward_probs(bad.view()), Err(Error::BadBatch(_))));
    }

    #[test]
    fn arch_parsing() {
        assert_eq!("EfficientNet-B0".parse::<Arch>().unwrap(), Arch::EfficientNetB0);
        assert_eq!("resnet50".parse::<Arch>().unwrap(), Arch::ResNet50);
        assert!(matches!("vgg16".parse::<Arch>(), Err(Error::UnknownArch(_))));
    }
}

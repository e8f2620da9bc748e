use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Arch;
use crate::error::{Error, Result};
use crate::hashing::ParamHasher;

/// Environment variable naming the directory providers fetch weights from.
pub const PROVIDER_CACHE_ENV: &str = "LEAFVOTE_PROVIDER_CACHE";

/// A frozen feature extractor. There is deliberately no mutable access.
pub trait Backbone: Send + Sync + fmt::Debug {
    fn arch(&self) -> Arch;
    fn feature_dim(&self) -> usize;
    /// Expected (height, width) of the preprocessed input.
    fn input_size(&self) -> (usize, usize);
    /// Pooled features for one preprocessed 3×H×W image.
    fn features(&self, image: ArrayView3<f32>) -> Result<Array1<f32>>;
    /// Hash over every backbone parameter, recomputed on each call.
    fn checksum(&self) -> String;
    /// Blocks until previously issued work has finished. CPU backbones run
    /// synchronously, so the default does nothing.
    fn synchronize(&self) {}
    fn device(&self) -> String {
        "cpu".to_string()
    }
}

/// Source of backbone weights.
pub trait BackboneProvider: Send + Sync {
    fn name(&self) -> &str;
    fn load(&self, arch: Arch, pretrained: bool) -> Result<Arc<dyn Backbone>>;
}

/// Shape parameters of an architecture as exposed to the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchDefinition {
    pub arch: Arch,
    /// Width of the pooled feature vector the original classifier consumed.
    pub feature_dim: usize,
    pub input_size: (usize, usize),
    // stand-in extractor geometry for the random provider
    patch: usize,
    channels: usize,
    grid: usize,
}

impl ArchDefinition {
    pub fn of(arch: Arch) -> Self {
        let (feature_dim, patch, channels) = match arch {
            Arch::ResNet50 => (2048, 16, 64),
            Arch::EfficientNetB0 => (1280, 32, 48),
            Arch::DenseNet121 => (1024, 8, 32),
        };
        Self {
            arch,
            feature_dim,
            input_size: (224, 224),
            patch,
            channels,
            grid: 2,
        }
    }
}

/// Offline provider with deterministic random weights.
///
/// Each architecture gets a patch-embedding convolution, ReLU, average
/// pooling onto a 2×2 grid and a projection to the architecture's feature
/// width. The weights depend only on (provider seed, arch, pretrained), so
/// checkpoints can be re-verified against the checksum without any download.
#[derive(Debug, Clone, Copy)]
pub struct RandomBackboneProvider {
    pub seed: u64,
}

impl Default for RandomBackboneProvider {
    fn default() -> Self {
        Self { seed: 0x1eaf_b0b0 }
    }
}

impl BackboneProvider for RandomBackboneProvider {
    fn name(&self) -> &str {
        "random"
    }

    fn load(&self, arch: Arch, pretrained: bool) -> Result<Arc<dyn Backbone>> {
        Ok(Arc::new(RandomBackbone::new(ArchDefinition::of(arch), self.seed, pretrained)))
    }
}

#[derive(Debug, Clone)]
pub struct RandomBackbone {
    def: ArchDefinition,
    /// channels × (3·patch²)
    conv: Array2<f32>,
    conv_bias: Array1<f32>,
    /// feature_dim × (channels·grid²)
    proj: Array2<f32>,
    proj_bias: Array1<f32>,
}

impl RandomBackbone {
    pub fn new(def: ArchDefinition, seed: u64, pretrained: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 * def.arch as u64 + u64::from(pretrained));
        let fan_conv = 3 * def.patch * def.patch;
        let pooled = def.channels * def.grid * def.grid;
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = (6.0 / fan_in as f32).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
        };
        let conv = uniform(def.channels, fan_conv, fan_conv);
        let conv_bias = uniform(1, def.channels, fan_conv).remove_axis(Axis(0)) * 0.1;
        let proj = uniform(def.feature_dim, pooled, pooled);
        let proj_bias = uniform(1, def.feature_dim, pooled).remove_axis(Axis(0)) * 0.1;
        Self {
            def,
            conv,
            conv_bias,
            proj,
            proj_bias,
        }
    }
}

impl Backbone for RandomBackbone {
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
        let p = self.def.patch;
        let (ph, pw) = (h / p, w / p);
        let mut patches = Array2::<f32>::zeros((ph * pw, 3 * p * p));
        for py in 0..ph {
            for px in 0..pw {
                let mut row = patches.row_mut(py * pw + px);
                let mut k = 0;
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            row[k] = image[[c, py * p + dy, px * p + dx]];
                            k += 1;
                        }
                    }
                }
            }
        }
        let mut act = patches.dot(&self.conv.t());
        act += &self.conv_bias;
        act.mapv_inplace(|v| v.max(0.0));

        let g = self.def.grid;
        let channels = self.def.channels;
        let mut pooled = Array1::<f32>::zeros(channels * g * g);
        let mut cell_count = vec![0usize; g * g];
        for py in 0..ph {
            for px in 0..pw {
                let cell = (py * g / ph) * g + px * g / pw;
                cell_count[cell] += 1;
                let a = act.row(py * pw + px);
                let mut slot = pooled.slice_mut(ndarray::s![cell * channels..(cell + 1) * channels]);
                slot += &a;
            }
        }
        for (cell, n) in cell_count.iter().enumerate() {
            let mut slot = pooled.slice_mut(ndarray::s![cell * channels..(cell + 1) * channels]);
            slot /= (*n).max(1) as f32;
        }

        let mut out = self.proj.dot(&pooled);
        out += &self.proj_bias;
        out.mapv_inplace(|v| v.max(0.0));
        Ok(out)
    }

    fn checksum(&self) -> String {
        let mut h = ParamHasher::default();
        h.update_str(self.def.arch.tag());
        for a in [&self.conv, &self.proj] {
            h.update_f32(a.as_slice().expect("standard layout"));
        }
        for b in [&self.conv_bias, &self.proj_bias] {
            h.update_f32(b.as_slice().expect("standard layout"));
        }
        h.finish()
    }
}

/// Looks up a provider by name. `cache_dir` falls back to
/// [`PROVIDER_CACHE_ENV`] for providers that read weight files.
pub fn provider_by_name(name: &str, cache_dir: Option<PathBuf>) -> Result<Box<dyn BackboneProvider>> {
    let _cache_dir = cache_dir.or_else(|| std::env::var_os(PROVIDER_CACHE_ENV).map(PathBuf::from));
    match name {
        "random" => Ok(Box::new(RandomBackboneProvider::default())),
        #[cfg(feature = "onnx")]
        "onnx" => {
            let dir = _cache_dir
                .ok_or_else(|| Error::ProviderError(format!("onnx provider needs {PROVIDER_CACHE_ENV} or a cache dir")))?;
            Ok(Box::new(super::OnnxBackboneProvider::new(dir)))
        }
        other => Err(Error::ProviderError(format!("unknown provider `{other}`"))),
    }
}

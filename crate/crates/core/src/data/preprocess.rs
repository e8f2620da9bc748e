use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// (height, width) in pixels.
    pub target_size: (usize, usize),
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: (224, 224),
            channel_mean: IMAGENET_MEAN,
            channel_std: IMAGENET_STD,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::BadPreprocessConfig("target size must be positive".into()));
        }
        if !self.channel_std.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::BadPreprocessConfig("channel std must be positive".into()));
        }
        if !self.channel_mean.iter().all(|m| m.is_finite()) {
            return Err(Error::BadPreprocessConfig("channel mean must be finite".into()));
        }
        Ok(())
    }
}

fn check_image(image: &ArrayView3<f32>) -> Result<()> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::BadImage(format!("expected 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::BadImage(format!("empty image {h}x{w}")));
    }
    Ok(())
}

/// Bilinear resize of an H×W×3 image with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: ArrayView3<f32>, out_h: usize, out_w: usize) -> Result<Array3<f32>> {
    check_image(&image)?;
    let (in_h, in_w, _) = image.dim();
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = taps(out_h, in_h);
    let xs = taps(out_w, in_w);
    let mut out = Array3::<f32>::zeros((out_h, out_w, 3));
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for ch in 0..3 {
                let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
                let bottom = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
                out[[oy, ox, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Ok(out)
}

/// Resizes an H×W×3 image in `[0, 1]`, normalizes each channel with
/// `(v - mean) / std`, and returns it channel-first (3×H'×W').
pub fn preprocess(image: ArrayView3<f32>, cfg: &PreprocessConfig) -> Result<Array3<f32>> {
    cfg.validate()?;
    let (th, tw) = cfg.target_size;
    let resized = resize_bilinear(image, th, tw)?;
    let mut chw = resized.permuted_axes([2, 0, 1]).as_standard_layout().into_owned();
    for (ch, mut plane) in chw.axis_iter_mut(Axis(0)).enumerate() {
        let (mean, std) = (cfg.channel_mean[ch], cfg.channel_std[ch]);
        plane.mapv_inplace(|v| (v - mean) / std);
    }
    Ok(chw)
}

/// Preprocesses a list of images into a B×3×H'×W' batch.
pub fn preprocess_batch(images: &[Array3<f32>], cfg: &PreprocessConfig, exec: Exec) -> Result<Array4<f32>> {
    let (th, tw) = cfg.target_size;
    let planes = exec.try_map(images, |img| preprocess(img.view(), cfg))?;
    let mut batch = Array4::<f32>::zeros((planes.len(), 3, th, tw));
    for (mut slot, p) in batch.axis_iter_mut(Axis(0)).zip(&planes) {
        slot.assign(p);
    }
    Ok(batch)
}

//! Synthetic "class-tinted noise" datasets.
//!
//! Every class gets a distinct base color; each image is that color plus
//! independent uniform per-pixel noise. The classes are separable by mean
//! color, which is what the frozen random backbones pick up.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::MemorySource;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct TintedNoise {
    pub class_names: Vec<String>,
    pub per_class: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f32,
    /// Half-width of a uniform per-image color shift shared by all pixels.
    /// Unlike pixel noise it survives pooling, so nearby tints overlap.
    pub jitter: f32,
    pub seed: u64,
}

impl TintedNoise {
    pub fn new<S: AsRef<str>>(class_names: &[S], per_class: usize) -> Self {
        Self {
            class_names: class_names.iter().map(|s| s.as_ref().to_string()).collect(),
            per_class,
            size: 32,
            noise: 0.25,
            jitter: 0.0,
            seed: 42,
        }
    }

    /// Base color of class `k`: evenly spaced hues, alternating brightness.
    pub fn tint(&self, k: usize) -> [f32; 3] {
        let n = self.class_names.len().max(1) as f32;
        let hue = 6.0 * k as f32 / n;
        let value = if k.is_multiple_of(2) { 0.85 } else { 0.6 };
        let sat = 0.75;
        let c = value * sat;
        let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
        let (r, g, b) = match hue as usize {
            0 => (c, x, 0.0),
            1 => (x, c, 0.0),
            2 => (0.0, c, x),
            3 => (0.0, x, c),
            4 => (x, 0.0, c),
            _ => (c, 0.0, x),
        };
        let m = value - c;
        [r + m, g + m, b + m]
    }

    fn image(&self, class: usize, index: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((class * self.per_class + index) as u64);
        let mut tint = self.tint(class);
        if self.jitter > 0.0 {
            for t in &mut tint {
                *t += rng.random_range(-self.jitter..=self.jitter);
            }
        }
        let noise = self.noise;
        Array3::from_shape_fn((self.size, self.size, 3), |(_, _, c)| {
            (tint[c] + rng.random_range(-noise..=noise)).clamp(0.0, 1.0)
        })
    }

    fn path(&self, class: usize, index: usize) -> String {
        format!("{}/img_{index:04}.png", self.class_names[class])
    }

    /// `(relative path, class index)` of every image, in class order.
    pub fn listing(&self) -> Vec<(String, usize)> {
        (0..self.class_names.len())
            .flat_map(|c| (0..self.per_class).map(move |i| (self.path(c, i), c)))
            .collect()
    }

    /// All images, keyed by `<class>/img_NNNN.png`.
    pub fn to_memory(&self) -> MemorySource {
        let mut src = MemorySource::new();
        for class in 0..self.class_names.len() {
            for i in 0..self.per_class {
                src.insert(self.path(class, i), self.image(class, i));
            }
        }
        src
    }

    /// Writes the dataset as PNG files under `root/<class>/`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for class in 0..self.class_names.len() {
            let dir = root.join(&self.class_names[class]);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..self.per_class {
                let img = self.image(class, i);
                let raw: Vec<u8> = img.iter().map(|v| (v * 255.0).round() as u8).collect();
                let buf = image::RgbImage::from_raw(self.size as u32, self.size as u32, raw).expect("buffer size matches");
                let path = root.join(self.path(class, i));
                buf.save(&path).map_err(|e| Error::BadImage(format!("{}: {e}", path.display())))?;
            }
        }
        Ok(())
    }
}

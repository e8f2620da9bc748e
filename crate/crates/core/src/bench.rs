//! Per-image inference latency and FPS.
//!
//! Batch size is fixed at 1. Warmup calls run first and are never timed;
//! each timed call is bracketed by [`Predictor::synchronize`] so work that
//! a device queues asynchronously is counted.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::ensemble::{soft_vote, EnsembleWeights, ProbabilityMatrix};
use crate::error::{Error, Result};
use crate::model::AdaptedModel;
use crate::par::Exec;

pub const DEFAULT_SAMPLES: usize = 1000;
pub const DEFAULT_WARMUP: usize = 50;

/// Monotonic time source.
pub trait Clock: Sync {
    fn now(&self) -> Duration;
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    origin: Instant,
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }
}

/// Manually advanced clock for deterministic timing tests.
#[derive(Debug, Default)]
pub struct FakeClock {
    nanos: AtomicU64,
}

impl FakeClock {
    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }
}

/// Anything that maps one preprocessed image to class probabilities.
pub trait Predictor: Sync {
    fn tag(&self) -> String;
    fn predict_one(&self, image: ArrayView3<f32>) -> Result<Array1<f64>>;
    fn synchronize(&self) {}
    fn device(&self) -> String {
        "cpu".to_string()
    }
}

impl Predictor for AdaptedModel {
    fn tag(&self) -> String {
        AdaptedModel::tag(self).to_string()
    }

    fn predict_one(&self, image: ArrayView3<f32>) -> Result<Array1<f64>> {
        let batch = image.insert_axis(Axis(0));
        let probs = self.forward_probs_with(batch, Exec::Sequential)?;
        Ok(probs.row(0).to_owned())
    }

    fn synchronize(&self) {
        self.backbone().synchronize();
    }

    fn device(&self) -> String {
        self.backbone().device()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub samples: usize,
    pub warmup: usize,
    /// Run ensemble members in parallel. Numbers from this mode are not
    /// comparable to sequential measurements.
    pub concurrent: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            samples: DEFAULT_SAMPLES,
            warmup: DEFAULT_WARMUP,
            concurrent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub model_tag: String,
    pub mean_latency_ms: f64,
    pub fps: u32,
    pub num_samples: usize,
    pub warmup_samples: usize,
    pub device: String,
    pub concurrent: bool,
}

/// Frames per second for a per-image latency, rounded half up.
pub fn fps_from_latency(ms: f64) -> Result<u32> {
    if !(ms.is_finite() && ms > 0.0) {
        return Err(Error::BadLatency(ms));
    }
    Ok((1000.0 / ms + 0.5).floor() as u32)
}

fn run_timed<F>(images: &[Array3<f32>], opts: &BenchOptions, clock: &dyn Clock, sync: &dyn Fn(), mut call: F) -> Result<f64>
where
    F: FnMut(ArrayView3<f32>) -> Result<()>,
{
    if opts.samples == 0 || images.len() < opts.samples {
        return Err(Error::InsufficientSamples {
            needed: opts.samples.max(1),
            available: images.len(),
        });
    }
    for i in 0..opts.warmup {
        call(images[i % images.len()].view())?;
    }
    sync();
    let mut total = Duration::ZERO;
    for img in &images[..opts.samples] {
        let start = clock.now();
        call(img.view())?;
        sync();
        total += clock.now() - start;
    }
    Ok(total.as_secs_f64() * 1000.0 / opts.samples as f64)
}

fn result(tag: String, mean: f64, opts: &BenchOptions, device: String, concurrent: bool) -> Result<BenchmarkResult> {
    Ok(BenchmarkResult {
        model_tag: tag,
        mean_latency_ms: mean,
        fps: fps_from_latency(mean)?,
        num_samples: opts.samples,
        warmup_samples: opts.warmup,
        device,
        concurrent,
    })
}

/// Mean per-image latency of one model over `opts.samples` images.
pub fn bench_model(model: &dyn Predictor, images: &[Array3<f32>], opts: &BenchOptions, clock: &dyn Clock) -> Result<BenchmarkResult> {
    let mean = run_timed(images, opts, clock, &|| model.synchronize(), |img| model.predict_one(img).map(drop))?;
    result(model.tag(), mean, opts, model.device(), false)
}

/// Mean per-image latency of every member forward plus the equal-weight combine.
pub fn bench_ensemble(models: &[&dyn Predictor], images: &[Array3<f32>], opts: &BenchOptions, clock: &dyn Clock) -> Result<BenchmarkResult> {
    if models.is_empty() {
        return Err(Error::NoModels);
    }
    let weights = EnsembleWeights::equal(models.len())?;
    let exec = if opts.concurrent { Exec::Parallel } else { Exec::Sequential };
    let sync = || models.iter().for_each(|m| m.synchronize());
    let mean = run_timed(images, opts, clock, &sync, |img| {
        let rows = exec.try_map(models, |m| m.predict_one(img))?;
        let members = rows
            .into_iter()
            .enumerate()
            .map(|(i, row)| {
                let n = row.len();
                ProbabilityMatrix::new(row.into_shape_with_order((1, n)).expect("1×C"), vec!["x".into()], format!("m{i}"))
            })
            .collect::<Result<Vec<_>>>()?;
        soft_vote(&members, &weights).map(drop)
    })?;
    let device = models[0].device();
    result("ensemble".to_string(), mean, opts, device, opts.concurrent && exec.is_parallel())
}

pub const BENCH_CSV_HEADER: &str = "model,time_ms_per_image,fps,samples,warmup,device,concurrent";

pub fn results_to_csv(results: &[BenchmarkResult]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in results {
        writeln!(
            out,
            "{},{:.3},{},{},{},{},{}",
            r.model_tag, r.mean_latency_ms, r.fps, r.num_samples, r.warmup_samples, r.device, r.concurrent
        )
        .unwrap();
    }
    out
}

pub fn results_from_csv(text: &str, origin: &Path) -> Result<Vec<BenchmarkResult>> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(BENCH_CSV_HEADER) {
        return Err(Error::parse(origin, 1, "bad benchmark header"));
    }
    lines
        .map(|(i, line)| {
            let bad = || Error::parse(origin, i + 1, "malformed benchmark row");
            let f: Vec<&str> = line.split(',').collect();
            let [tag, ms, fps, samples, warmup, device, concurrent] = f[..] else { return Err(bad()) };
            Ok(BenchmarkResult {
                model_tag: tag.to_string(),
                mean_latency_ms: ms.parse().map_err(|_| bad())?,
                fps: fps.parse().map_err(|_| bad())?,
                num_samples: samples.parse().map_err(|_| bad())?,
                warmup_samples: warmup.parse().map_err(|_| bad())?,
                device: device.to_string(),
                concurrent: concurrent.parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

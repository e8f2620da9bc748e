//! End-to-end runs: split, train, cache, vote, evaluate, benchmark, report.
//!
//! Artifacts are written into a staging directory next to `output_dir` and
//! moved into place only when every stage succeeded, so a failed run leaves
//! nothing behind.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::ablation::{run_grid, AblationGrid};
use crate::bench::{bench_ensemble, bench_model, results_to_csv, BenchOptions, MonotonicClock, Predictor};
use crate::data::{
    list_dataset, make_split, preprocess, DirectorySource, ImageSource, PreprocessConfig, Split, SplitManifest, SplitRatios,
};
use crate::ensemble::{predict, soft_vote, EnsembleWeights, ProbabilityCache, ProbabilityMatrix, Scheme};
use crate::error::{Error, Result, StageContext};
use crate::figures::emit_figures;
use crate::hashing::sha256_hex;
use crate::labels::LabelRegistry;
use crate::metrics::{confusion, crop_report, report};
use crate::model::{build_model, provider_by_name, AdaptedModel, Arch, BackboneProvider, Checkpoint, ModelSpec};
use crate::par::Exec;
use crate::train::{extract_features, train, TrainConfig, TrainHistory};

pub const REGISTRY_FILE: &str = "registry.txt";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SUMMARY_FILE: &str = "run_summary.json";

fn default_output_dir() -> PathBuf {
    PathBuf::from("leafvote-run")
}
fn default_seed() -> u64 {
    42
}
fn default_archs() -> Vec<Arch> {
    Arch::ALL.to_vec()
}
fn default_provider() -> String {
    "random".to_string()
}
fn default_bench_samples() -> usize {
    crate::bench::DEFAULT_SAMPLES
}
fn default_bench_warmup() -> usize {
    crate::bench::DEFAULT_WARMUP
}
fn default_true() -> bool {
    true
}
fn default_train_ratio() -> f64 {
    SplitRatios::default().train
}
fn default_held_out_ratio() -> f64 {
    SplitRatios::default().val
}

/// Flat run configuration. Only `dataset_root` is required; every other
/// default reproduces the reference recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset_root: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Split seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_train_ratio")]
    pub train_ratio: f64,
    #[serde(default = "default_held_out_ratio")]
    pub val_ratio: f64,
    #[serde(default = "default_held_out_ratio")]
    pub test_ratio: f64,
    #[serde(default = "default_archs")]
    pub archs: Vec<Arch>,
    #[serde(flatten)]
    pub train: TrainConfig,
    /// Head initialization and epoch shuffling seed.
    #[serde(default = "default_seed")]
    pub head_seed: u64,
    #[serde(default = "default_provider")]
    pub provider: String,
    #[serde(default)]
    pub provider_cache: Option<PathBuf>,
    /// Weighting schemes for the grid, e.g. `equal,custom:1,2,1`. When unset:
    /// equal, validation-weighted, and for the three default architectures
    /// also DenseNet-heavy and ResNet-heavy.
    #[serde(default)]
    pub schemes: Option<String>,
    #[serde(default = "default_true")]
    pub bench: bool,
    #[serde(default = "default_bench_samples")]
    pub bench_samples: usize,
    #[serde(default = "default_bench_warmup")]
    pub bench_warmup: usize,
    #[serde(default)]
    pub bench_concurrent: bool,
    /// Train the models concurrently instead of one after another.
    #[serde(default)]
    pub parallel_models: bool,
}

impl PipelineConfig {
    pub fn new(dataset_root: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset_root: dataset_root.into(),
            output_dir: output_dir.into(),
            seed: default_seed(),
            train_ratio: default_train_ratio(),
            val_ratio: default_held_out_ratio(),
            test_ratio: default_held_out_ratio(),
            archs: default_archs(),
            train: TrainConfig::default(),
            head_seed: default_seed(),
            provider: default_provider(),
            provider_cache: None,
            schemes: None,
            bench: true,
            bench_samples: default_bench_samples(),
            bench_warmup: default_bench_warmup(),
            bench_concurrent: false,
            parallel_models: false,
        }
    }

    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train_ratio,
            val: self.val_ratio,
            test: self.test_ratio,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// SHA-256 over the canonical JSON form of every field.
    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if !self.dataset_root.is_dir() {
            return Err(Error::Config(format!("dataset root {} is not a directory", self.dataset_root.display())));
        }
        self.ratios().validate()?;
        self.train.validate()?;
        if self.archs.is_empty() {
            return Err(Error::Config("no architectures selected".into()));
        }
        let mut sorted = self.archs.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.archs.len() {
            return Err(Error::Config("architectures must be distinct".into()));
        }
        Ok(())
    }
}

/// Per-model outcome recorded in the run summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub arch: Arch,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub selected_epoch: usize,
    pub test_accuracy: f64,
    pub backbone_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tool_version: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub split_seed: u64,
    pub head_seed: u64,
    pub registry_hash: String,
    pub num_images: usize,
    pub split_counts: [usize; 3],
    pub models: Vec<ModelSummary>,
    pub ensemble_accuracy: f64,
    pub artifacts: Vec<String>,
    pub elapsed_seconds: f64,
}

/// Loads every image of `split` and runs it through `model`, returning a
/// matrix whose rows are the manifest paths in manifest order.
pub fn infer_cache(
    model: &AdaptedModel,
    manifest: &SplitManifest,
    split: Split,
    source: &dyn ImageSource,
    pp: &PreprocessConfig,
) -> Result<ProbabilityMatrix> {
    let entries: Vec<_> = manifest.entries_in(split).collect();
    if entries.is_empty() {
        return Err(Error::EmptySplit(split.as_str()));
    }
    let set = extract_features(model, &entries, source, pp, Exec::default())?;
    let probs = model.probs_from_features(set.features.view())?;
    ProbabilityMatrix::new(probs, entries.iter().map(|e| e.path.clone()).collect(), model.tag())
}

/// True class of each image id, looked up in the manifest.
pub fn truth_for(manifest: &SplitManifest, image_ids: &[String]) -> Result<Vec<usize>> {
    let by_path: HashMap<&str, usize> = manifest.entries.iter().map(|e| (e.path.as_str(), e.class_id)).collect();
    image_ids
        .iter()
        .map(|id| {
            by_path
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::AlignmentError(format!("image `{id}` is not in the manifest")))
        })
        .collect()
}

/// Schemes used when none are configured.
pub fn default_schemes(archs: &[Arch], val_accuracies_pct: &[f64]) -> Vec<Scheme> {
    let mut schemes = vec![Scheme::Equal, Scheme::ValidationWeighted(val_accuracies_pct.to_vec())];
    if archs == Arch::ALL {
        schemes.push(Scheme::Custom(vec![0.5, 0.5, 2.0]));
        schemes.push(Scheme::Custom(vec![2.0, 0.5, 0.5]));
    }
    schemes
}

/// Loads and preprocesses up to `limit` images, in the given order.
pub fn load_images<S: AsRef<str> + Sync>(
    paths: &[S],
    source: &dyn ImageSource,
    pp: &PreprocessConfig,
    limit: usize,
) -> Result<Vec<Array3<f32>>> {
    let paths = &paths[..limit.min(paths.len())];
    Exec::default().try_map(paths, |p| preprocess(source.load(p.as_ref())?.view(), pp))
}

/// Loads and preprocesses the images of `split`, in manifest order.
pub fn load_split_images(
    manifest: &SplitManifest,
    split: Split,
    source: &dyn ImageSource,
    pp: &PreprocessConfig,
    limit: usize,
) -> Result<Vec<Array3<f32>>> {
    let paths: Vec<&str> = manifest.entries_in(split).map(|e| e.path.as_str()).collect();
    load_images(&paths, source, pp, limit)
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn staging_dir(output_dir: &Path) -> PathBuf {
    let name = output_dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned());
    output_dir.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}

/// Runs every stage and returns the summary written to `run_summary.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate().stage("config")?;
    let provider = provider_by_name(&cfg.provider, cfg.provider_cache.clone()).stage("config")?;
    if let Some(parent) = cfg.output_dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent).stage("config")?;
    }
    let staging = staging_dir(&cfg.output_dir);
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e)).stage("config")?;
    }
    mkdir(&staging).stage("config")?;

    let result = run_stages(cfg, provider.as_ref(), &staging).and_then(|summary| {
        if cfg.output_dir.exists() {
            std::fs::remove_dir_all(&cfg.output_dir)
                .map_err(|e| Error::io(&cfg.output_dir, e))
                .stage("finalize")?;
        }
        std::fs::rename(&staging, &cfg.output_dir)
            .map_err(|e| Error::io(&cfg.output_dir, e))
            .stage("finalize")?;
        Ok(summary)
    });
    if result.is_err() {
        let _ = std::fs::remove_dir_all(&staging);
    }
    result
}

fn run_stages(cfg: &PipelineConfig, provider: &dyn BackboneProvider, out: &Path) -> Result<RunSummary> {
    let started = Instant::now();
    let pp = PreprocessConfig::default();
    let source = DirectorySource::new(&cfg.dataset_root);
    let mut artifacts = Vec::new();
    let mut record = |p: &Path| artifacts.push(p.strip_prefix(out).unwrap_or(p).to_string_lossy().replace('\\', "/"));

    // registry + split
    let registry = LabelRegistry::from_directory(&cfg.dataset_root).stage("registry")?;
    let registry_path = out.join(REGISTRY_FILE);
    registry.write(&registry_path).stage("registry")?;
    record(&registry_path);

    let files = list_dataset(&cfg.dataset_root, &registry).stage("split")?;
    let manifest = make_split(&files, &registry, cfg.ratios(), cfg.seed).stage("split")?;
    let manifest_path = out.join(MANIFEST_FILE);
    manifest.write(&manifest_path).stage("split")?;
    record(&manifest_path);

    // training
    let ckpt_dir = out.join("checkpoints");
    mkdir(&ckpt_dir).stage("train")?;
    let exec = if cfg.parallel_models { Exec::Parallel } else { Exec::Sequential };
    let trained: Vec<(AdaptedModel, TrainHistory)> = exec
        .try_map(&cfg.archs, |&arch| {
            let model = build_model(ModelSpec::new(arch, registry.len()), provider, cfg.head_seed)?;
            train(model, &manifest, &source, &pp, &cfg.train)
        })
        .stage("train")?;
    for (model, history) in &trained {
        let ckpt = ckpt_dir.join(format!("{}.json", model.tag()));
        Checkpoint::from_model(model, Some(cfg.train), Some(history.clone()))
            .write(&ckpt)
            .stage("train")?;
        let hist = ckpt_dir.join(format!("{}_history.csv", model.tag()));
        write(&hist, history.to_csv()).stage("train")?;
        record(&ckpt);
        record(&hist);
    }

    // probability caches, read back from disk so everything downstream sees
    // exactly the persisted values
    let cache_dir = out.join("caches");
    mkdir(&cache_dir).stage("infer-cache")?;
    let mut caches = Vec::new();
    for (model, _) in &trained {
        let matrix = infer_cache(model, &manifest, Split::Test, &source, &pp).stage("infer-cache")?;
        let path = cache_dir.join(format!("{}.csv", model.tag()));
        ProbabilityCache {
            matrix,
            registry_hash: registry.content_hash(),
        }
        .write(&path)
        .stage("infer-cache")?;
        caches.push(ProbabilityCache::read(&path).stage("infer-cache")?.matrix);
        record(&path);
    }

    // ensemble + metrics
    let vote = soft_vote(&caches, &EnsembleWeights::equal(caches.len()).stage("ensemble")?).stage("ensemble")?;
    let vote_path = cache_dir.join("ensemble.csv");
    ProbabilityCache {
        matrix: vote.clone(),
        registry_hash: registry.content_hash(),
    }
    .write(&vote_path)
    .stage("ensemble")?;
    record(&vote_path);

    let truth = truth_for(&manifest, vote.image_ids()).stage("metrics")?;
    let cm = confusion(&truth, &predict(&vote), registry.len()).stage("metrics")?;
    let metrics = report(&cm);
    let crops = crop_report(&cm, &registry).stage("metrics")?;
    let names: Vec<&str> = registry.names().collect();
    let metrics_dir = out.join("metrics");
    mkdir(&metrics_dir).stage("metrics")?;
    for (file, text) in [
        ("report.csv", metrics.to_csv(&names)),
        ("report.json", metrics.to_json().stage("metrics")?),
        ("confusion.csv", cm.to_csv(&names)),
        ("crop_report.csv", crops.to_csv()),
    ] {
        let path = metrics_dir.join(file);
        write(&path, text).stage("metrics")?;
        record(&path);
    }

    // ablation grid
    let val_pct: Vec<f64> = trained.iter().map(|(_, h)| 100.0 * h.best_val_accuracy).collect();
    let schemes = match &cfg.schemes {
        Some(s) => Scheme::parse_list(s).stage("ablate")?,
        None => default_schemes(&cfg.archs, &val_pct),
    };
    let grid = if caches.len() >= 2 {
        let grid = run_grid(&caches, &truth, &schemes).stage("ablate")?;
        let path = out.join("ablation_grid.csv");
        write(&path, grid.to_csv()).stage("ablate")?;
        record(&path);
        grid
    } else {
        AblationGrid { rows: Vec::new() }
    };

    // benchmark
    if cfg.bench {
        let n_test = manifest.count(Split::Test);
        let samples = cfg.bench_samples.min(n_test);
        let images = load_split_images(&manifest, Split::Test, &source, &pp, samples).stage("bench")?;
        let opts = BenchOptions {
            samples,
            warmup: cfg.bench_warmup,
            concurrent: cfg.bench_concurrent,
        };
        let clock = MonotonicClock::default();
        let mut results = Vec::new();
        for (model, _) in &trained {
            results.push(bench_model(model, &images, &opts, &clock).stage("bench")?);
        }
        let members: Vec<&dyn Predictor> = trained.iter().map(|(m, _)| m as &dyn Predictor).collect();
        results.push(bench_ensemble(&members, &images, &opts, &clock).stage("bench")?);
        let path = out.join("bench.csv");
        write(&path, results_to_csv(&results)).stage("bench")?;
        record(&path);
    }

    // figures
    let fig_dir = out.join("figures");
    for path in emit_figures(&metrics, &names, &grid, &fig_dir).stage("report")? {
        record(&path);
    }

    let test_acc: HashMap<&str, f64> = caches
        .iter()
        .map(|c| {
            let t = truth_for(&manifest, c.image_ids())?;
            Ok((c.model_tag(), report(&confusion(&t, &predict(c), registry.len())?).overall_accuracy))
        })
        .collect::<Result<_>>()
        .stage("metrics")?;
    let models = trained
        .iter()
        .map(|(m, h)| ModelSummary {
            arch: m.spec().arch,
            best_val_accuracy: h.best_val_accuracy,
            best_epoch: h.best_epoch,
            selected_epoch: h.selected_epoch,
            test_accuracy: test_acc[m.tag()],
            backbone_checksum: m.backbone_checksum().to_string(),
        })
        .collect();
    let summary_path = out.join(SUMMARY_FILE);
    record(&summary_path);
    let summary = RunSummary {
        tool_version: crate::VERSION.to_string(),
        config_hash: cfg.config_hash(),
        config: cfg.clone(),
        split_seed: cfg.seed,
        head_seed: cfg.head_seed,
        registry_hash: registry.content_hash(),
        num_images: manifest.entries.len(),
        split_counts: Split::ALL.map(|s| manifest.count(s)),
        models,
        ensemble_accuracy: metrics.overall_accuracy,
        artifacts,
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    write(&summary_path, serde_json::to_string_pretty(&summary)?).stage("report")?;
    Ok(summary)
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use leafvote::ablation::run_grid;
use leafvote::bench::{bench_ensemble, bench_model, results_to_csv, BenchOptions, MonotonicClock, Predictor};
use leafvote::data::{list_dataset, make_split, DirectorySource, PreprocessConfig, Split, SplitManifest, SplitRatios};
use leafvote::ensemble::{predict, soft_vote, EnsembleWeights, ProbabilityCache, ProbabilityMatrix, Scheme};
use leafvote::error::StageContext;
use leafvote::figures::emit_figures;
use leafvote::fixture::TintedNoise;
use leafvote::labels::{LabelRegistry, PLANTVILLAGE_CLASSES};
use leafvote::metrics::{confusion, crop_report, report, MetricsReport};
use leafvote::model::{build_model, provider_by_name, AdaptedModel, Arch, BackboneProvider, Checkpoint, ModelSpec};
use leafvote::pipeline::{infer_cache, load_images, run_pipeline, truth_for, PipelineConfig};
use leafvote::train::{train, CheckpointPolicy, TrainConfig};
use leafvote::{ablation::AblationGrid, Error};

#[derive(Parser)]
#[command(name = "leafvote", version, about = "Train frozen-backbone leaf disease classifiers and evaluate soft-voting ensembles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic class-tinted noise dataset.
    MakeFixture(MakeFixtureArgs),
    /// Build the label registry and a stratified split manifest.
    Split(SplitArgs),
    /// Train one classification head on a frozen backbone.
    Train(TrainArgs),
    /// Write a probability cache for one checkpoint on one split.
    InferCache(InferCacheArgs),
    /// Combine probability caches by weighted soft voting.
    Ensemble(EnsembleArgs),
    /// Evaluate singletons, pairs and full ensembles from caches.
    Ablate(AblateArgs),
    /// Classification report, confusion matrix and crop breakdown for a cache.
    Metrics(MetricsArgs),
    /// Measure per-image latency of checkpoints and their ensemble.
    Bench(BenchArgs),
    /// Render figures from a metrics report and an ablation grid.
    Report(ReportArgs),
    /// Run every stage from a TOML config.
    Run(RunArgs),
}

#[derive(Args)]
struct ProviderArgs {
    /// Backbone provider: `random`, or `onnx` when built with that feature.
    #[arg(long, default_value = "random")]
    provider: String,
    /// Directory holding exported backbones for file-based providers.
    #[arg(long)]
    provider_cache: Option<PathBuf>,
}

impl ProviderArgs {
    fn load(&self) -> leafvote::Result<Box<dyn BackboneProvider>> {
        provider_by_name(&self.provider, self.provider_cache.clone())
    }
}

#[derive(Args)]
struct MakeFixtureArgs {
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated class names; defaults to the 15 PlantVillage classes.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long, default_value_t = 30)]
    per_class: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0.25)]
    noise: f32,
    /// Per-image color shift; makes neighbouring classes overlap.
    #[arg(long, default_value_t = 0.0)]
    jitter: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Directory receiving registry.txt and manifest.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.7,0.15,0.15")]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    arch: Arch,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value = "bestval")]
    policy: CheckpointPolicy,
    #[arg(long, default_value_t = 42)]
    head_seed: u64,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct InferCacheArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Member caches, in weight order.
    #[arg(long = "cache", required = true)]
    caches: Vec<PathBuf>,
    /// One weight per cache; equal weights when omitted.
    #[arg(long, value_delimiter = ',')]
    weights: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long = "cache", required = true)]
    caches: Vec<PathBuf>,
    #[arg(long)]
    manifest: PathBuf,
    /// Scheme list, e.g. `equal,valweighted:95.5,95.3,96.3,custom:0.5,0.5,2`.
    #[arg(long, default_value = "equal")]
    schemes: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Checkpoints to time, comma-separated or repeated.
    #[arg(long, alias = "checkpoint", value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    /// A dataset directory (every image is used) or a split manifest (its
    /// test split is used, resolved against `--dataset`).
    #[arg(long)]
    images: PathBuf,
    /// Dataset root for manifest paths.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = leafvote::bench::DEFAULT_SAMPLES)]
    samples: usize,
    #[arg(long, default_value_t = leafvote::bench::DEFAULT_WARMUP)]
    warmup: usize,
    /// Run ensemble members concurrently. These timings are not comparable
    /// to sequential ones.
    #[arg(long)]
    concurrent: bool,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    provider: ProviderArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json written by `metrics`.
    #[arg(long)]
    metrics: PathBuf,
    #[arg(long)]
    registry: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `dataset_root`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            match err.downcast_ref::<Error>().and_then(Error::stage) {
                Some(stage) => eprintln!("error [{stage}]: {err:#}"),
                None => eprintln!("error: {err:#}"),
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> anyhow::Result<()> {
    match command {
        Command::MakeFixture(a) => make_fixture(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::InferCache(a) => infer_cache_cmd(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Ablate(a) => ablate(a),
        Command::Metrics(a) => metrics(a),
        Command::Bench(a) => bench(a),
        Command::Report(a) => report_cmd(a),
        Command::Run(a) => run(a),
    }
}

fn mkdir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_to_string(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_caches(paths: &[PathBuf], stage: &'static str) -> anyhow::Result<(Vec<ProbabilityMatrix>, String)> {
    let mut caches = Vec::new();
    let mut hash: Option<String> = None;
    for path in paths {
        let cache = ProbabilityCache::read(path).stage(stage)?;
        match &hash {
            Some(h) if *h != cache.registry_hash => {
                return Err(Error::RegistryMismatch {
                    expected: h.clone(),
                    found: cache.registry_hash,
                })
                .stage(stage)
                .map_err(Into::into)
            }
            _ => hash = Some(cache.registry_hash.clone()),
        }
        caches.push(cache.matrix);
    }
    Ok((caches, hash.unwrap_or_default()))
}

fn load_checked(manifest: &Path, registry: &Path, stage: &'static str) -> anyhow::Result<(SplitManifest, LabelRegistry)> {
    let registry = LabelRegistry::read(registry).stage(stage)?;
    let manifest = SplitManifest::read(manifest).stage(stage)?;
    manifest.check_registry(&registry).stage(stage)?;
    Ok((manifest, registry))
}

fn make_fixture(a: MakeFixtureArgs) -> anyhow::Result<()> {
    let classes: Vec<String> = if a.classes.is_empty() {
        PLANTVILLAGE_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        a.classes
    };
    let fixture = TintedNoise {
        size: a.size,
        noise: a.noise,
        jitter: a.jitter,
        seed: a.seed,
        ..TintedNoise::new(&classes, a.per_class)
    };
    fixture.write(&a.out).stage("make-fixture")?;
    println!("wrote {} images in {} classes to {}", classes.len() * a.per_class, classes.len(), a.out.display());
    Ok(())
}

fn split(a: SplitArgs) -> anyhow::Result<()> {
    let [train, val, test] = a.ratios[..] else {
        bail!("--ratios needs exactly three values");
    };
    let ratios = SplitRatios { train, val, test };
    let registry = LabelRegistry::from_directory(&a.dataset).stage("split")?;
    let files = list_dataset(&a.dataset, &registry).stage("split")?;
    let manifest = make_split(&files, &registry, ratios, a.seed).stage("split")?;
    mkdir(&a.out)?;
    registry.write(&a.out.join("registry.txt")).stage("split")?;
    manifest.write(&a.out.join("manifest.csv")).stage("split")?;
    println!(
        "{} classes, {} images: train {}, val {}, test {}",
        registry.len(),
        manifest.entries.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.count(Split::Test)
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    let (manifest, registry) = load_checked(&a.manifest, &a.registry, "train")?;
    let provider = a.provider.load().stage("train")?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        checkpoint_policy: a.policy,
        ..TrainConfig::default()
    };
    let model = build_model(ModelSpec::new(a.arch, registry.len()), provider.as_ref(), a.head_seed).stage("train")?;
    let source = DirectorySource::new(&a.dataset);
    let (model, history) = train(model, &manifest, &source, &PreprocessConfig::default(), &cfg).stage("train")?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    Checkpoint::from_model(&model, Some(cfg), Some(history.clone())).write(&a.out).stage("train")?;
    println!(
        "{}: best val acc {:.4} at epoch {}, kept epoch {}",
        model.tag(),
        history.best_val_accuracy,
        history.best_epoch,
        history.selected_epoch
    );
    Ok(())
}

fn restore(path: &Path, provider: &dyn BackboneProvider, stage: &'static str) -> anyhow::Result<AdaptedModel> {
    Ok(Checkpoint::read(path).and_then(|c| c.restore(provider)).stage(stage)?)
}

fn infer_cache_cmd(a: InferCacheArgs) -> anyhow::Result<()> {
    let (manifest, registry) = load_checked(&a.manifest, &a.registry, "infer-cache")?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split `{other}`"),
    };
    let provider = a.provider.load().stage("infer-cache")?;
    let model = restore(&a.checkpoint, provider.as_ref(), "infer-cache")?;
    let source = DirectorySource::new(&a.dataset);
    let matrix = infer_cache(&model, &manifest, split, &source, &PreprocessConfig::default()).stage("infer-cache")?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    let rows = matrix.num_rows();
    ProbabilityCache {
        matrix,
        registry_hash: registry.content_hash(),
    }
    .write(&a.out)
    .stage("infer-cache")?;
    println!("{}: {rows} rows -> {}", model.tag(), a.out.display());
    Ok(())
}

fn ensemble(a: EnsembleArgs) -> anyhow::Result<()> {
    let (caches, registry_hash) = read_caches(&a.caches, "ensemble")?;
    let tags: Vec<String> = caches.iter().map(|c| c.model_tag().to_string()).collect();
    let weights = if a.weights.is_empty() {
        EnsembleWeights::equal(caches.len())
    } else {
        EnsembleWeights::new(a.weights, tags)
    }
    .stage("ensemble")?;
    let matrix = soft_vote(&caches, &weights).stage("ensemble")?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    ProbabilityCache { matrix, registry_hash }.write(&a.out).stage("ensemble")?;
    println!("ensemble of {} caches -> {}", caches.len(), a.out.display());
    Ok(())
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let (caches, _) = read_caches(&a.caches, "ablate")?;
    let manifest = SplitManifest::read(&a.manifest).stage("ablate")?;
    let truth = truth_for(&manifest, caches[0].image_ids()).stage("ablate")?;
    let schemes = Scheme::parse_list(&a.schemes).stage("ablate")?;
    let grid = run_grid(&caches, &truth, &schemes).stage("ablate")?;
    let csv = grid.to_csv();
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn metrics(a: MetricsArgs) -> anyhow::Result<()> {
    let (manifest, registry) = load_checked(&a.manifest, &a.registry, "metrics")?;
    let cache = ProbabilityCache::read(&a.cache).stage("metrics")?;
    if cache.registry_hash != registry.content_hash() {
        return Err(Error::RegistryMismatch {
            expected: registry.content_hash(),
            found: cache.registry_hash,
        })
            .stage("metrics")
            .map_err(Into::into);
    }
    let truth = truth_for(&manifest, cache.matrix.image_ids()).stage("metrics")?;
    let cm = confusion(&truth, &predict(&cache.matrix), registry.len()).stage("metrics")?;
    let rep = report(&cm);
    let names: Vec<&str> = registry.names().collect();
    mkdir(&a.out_dir)?;
    write(&a.out_dir.join("report.csv"), rep.to_csv(&names))?;
    write(&a.out_dir.join("report.json"), rep.to_json().stage("metrics")?)?;
    write(&a.out_dir.join("confusion.csv"), cm.to_csv(&names))?;
    write(&a.out_dir.join("crop_report.csv"), crop_report(&cm, &registry).stage("metrics")?.to_csv())?;
    println!("{}: accuracy {:.4} on {} images", cache.matrix.model_tag(), rep.overall_accuracy, cm.total());
    Ok(())
}

fn bench_images(a: &BenchArgs) -> anyhow::Result<Vec<ndarray::Array3<f32>>> {
    let pp = PreprocessConfig::default();
    let (paths, root): (Vec<String>, PathBuf) = if a.images.is_dir() {
        let registry = LabelRegistry::from_directory(&a.images).stage("bench")?;
        let files = list_dataset(&a.images, &registry).stage("bench")?;
        (files.into_iter().map(|(p, _)| p).collect(), a.images.clone())
    } else {
        let Some(root) = a.dataset.clone() else {
            bail!("--dataset is required when --images is a manifest");
        };
        let manifest = SplitManifest::read(&a.images).stage("bench")?;
        (manifest.entries_in(Split::Test).map(|e| e.path.clone()).collect(), root)
    };
    if paths.len() < a.samples {
        eprintln!("note: only {} images available, timing {} instead of {}", paths.len(), paths.len(), a.samples);
    }
    let source = DirectorySource::new(root);
    Ok(load_images(&paths, &source, &pp, a.samples).stage("bench")?)
}

fn bench(a: BenchArgs) -> anyhow::Result<()> {
    let provider = a.provider.load().stage("bench")?;
    let models = a
        .checkpoints
        .iter()
        .map(|p| restore(p, provider.as_ref(), "bench"))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let images = bench_images(&a)?;
    let opts = BenchOptions {
        samples: images.len(),
        warmup: a.warmup,
        concurrent: a.concurrent,
    };
    let clock = MonotonicClock::default();
    let mut results = Vec::new();
    for model in &models {
        results.push(bench_model(model, &images, &opts, &clock).stage("bench")?);
    }
    if models.len() > 1 {
        let members: Vec<&dyn Predictor> = models.iter().map(|m| m as &dyn Predictor).collect();
        results.push(bench_ensemble(&members, &images, &opts, &clock).stage("bench")?);
    }
    let csv = results_to_csv(&results);
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn report_cmd(a: ReportArgs) -> anyhow::Result<()> {
    let rep = MetricsReport::from_json(&read_to_string(&a.metrics)?).stage("report")?;
    let registry = LabelRegistry::read(&a.registry).stage("report")?;
    let grid = AblationGrid::parse_csv(&read_to_string(&a.grid)?, &a.grid).stage("report")?;
    let names: Vec<&str> = registry.names().collect();
    for path in emit_figures(&rep, &names, &grid, &a.out_dir).stage("report")? {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(a: RunArgs) -> anyhow::Result<()> {
    let mut cfg = PipelineConfig::read(&a.config).stage("config")?;
    if let Some(d) = a.dataset {
        cfg.dataset_root = d;
    }
    if let Some(o) = a.out {
        cfg.output_dir = o;
    }
    let summary = run_pipeline(&cfg)?;
    for m in &summary.models {
        println!("{:<16} val {:.4}  test {:.4}", m.arch.tag(), m.best_val_accuracy, m.test_accuracy);
    }
    println!("{:<16} test {:.4}", "ensemble", summary.ensemble_accuracy);
    println!("artifacts in {} ({:.1}s)", cfg.output_dir.display(), summary.elapsed_seconds);
    Ok(())
}

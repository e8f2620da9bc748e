//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Criterion 7 needs the real dataset and pretrained
//! backbones and reports SKIP unless `LEAFVOTE_PLANTVILLAGE_ROOT` is set.

use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use leafvote::ablation::{run_grid, RowKind};
use leafvote::bench::{bench_ensemble, fps_from_latency, BenchOptions, FakeClock, Predictor};
use leafvote::data::{make_split, PreprocessConfig, Split, SplitRatios};
use leafvote::ensemble::{make_scheme, predict, soft_vote, EnsembleWeights, ProbabilityMatrix, Scheme};
use leafvote::fixture::TintedNoise;
use leafvote::labels::{LabelRegistry, PLANTVILLAGE_CLASSES};
use leafvote::metrics::{confusion, report};
use leafvote::model::{build_model, Arch, ModelSpec, RandomBackboneProvider};
use leafvote::pipeline::{run_pipeline, PipelineConfig, RunSummary};
use leafvote::train::{train, TrainConfig};

struct Outcome {
    id: &'static str,
    name: &'static str,
    status: Status,
    detail: String,
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

fn outcome(id: &'static str, name: &'static str, checks: Vec<(bool, String)>) -> Outcome {
    let failed: Vec<&str> = checks.iter().filter(|(ok, _)| !ok).map(|(_, m)| m.as_str()).collect();
    let (status, detail) = if failed.is_empty() {
        (Status::Pass, checks.iter().map(|(_, m)| m.as_str()).collect::<Vec<_>>().join("; "))
    } else {
        (Status::Fail, failed.join("; "))
    };
    Outcome { id, name, status, detail }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize, tag: &str) -> ProbabilityMatrix {
    let mut values = Array2::<f64>::zeros((n, c));
    for mut row in values.rows_mut() {
        // Raise to a random power so some rows are peaked and some flat.
        let sharp = rng.random_range(0.5..6.0);
        row.mapv_inplace(|_| rng.random::<f64>().powf(sharp) + 1e-12);
        let s = row.sum();
        row /= s;
    }
    ProbabilityMatrix::new(values, (0..n).map(|i| format!("img{i:03}")).collect(), tag).unwrap()
}

#[allow(clippy::needless_range_loop)]
fn naive_vote(ms: &[&ProbabilityMatrix], w: &[f64]) -> Vec<Vec<f64>> {
    let (n, c) = (ms[0].num_rows(), ms[0].num_classes());
    let total: f64 = w.iter().sum();
    let mut out = vec![vec![0.0; c]; n];
    for i in 0..n {
        for k in 0..c {
            let mut acc = 0.0;
            for (m, wi) in ms.iter().zip(w) {
                acc += wi * m.values()[[i, k]];
            }
            out[i][k] = acc / total;
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_sum, mut worst_oracle, mut rescale_mismatch) = (0.0f64, 0.0f64, 0usize);
    for t in 0..1000 {
        let ms: Vec<ProbabilityMatrix> = ["a", "b", "c"].iter().map(|tag| random_probs(&mut rng, 64, 15, tag)).collect();
        let w: Vec<f64> = if t % 4 == 0 {
            vec![1.0; 3]
        } else {
            (0..3).map(|_| rng.random_range(0.0..5.0)).collect()
        };
        if w.iter().all(|&x| x == 0.0) {
            continue;
        }
        let weights = EnsembleWeights::new(w.clone(), vec![]).unwrap();
        let vote = soft_vote(&ms, &weights).unwrap();
        for row in vote.values().rows() {
            worst_sum = worst_sum.max((row.sum() - 1.0).abs());
        }
        let oracle = naive_vote(&ms.iter().collect::<Vec<_>>(), &w);
        for (i, row) in oracle.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                worst_oracle = worst_oracle.max((vote.values()[[i, k]] - v).abs());
            }
        }
        let base = predict(&vote);
        for alpha in [0.01, 1.0, 100.0] {
            let scaled = soft_vote(&ms, &weights.scaled(alpha).unwrap()).unwrap();
            rescale_mismatch += predict(&scaled).iter().zip(&base).filter(|(a, b)| a != b).count();
        }
    }
    let elapsed = start.elapsed();
    outcome(
        "1",
        "ensemble algebra",
        vec![
            (worst_sum <= 1e-9, format!("max |row sum - 1| = {worst_sum:.2e} (<= 1e-9)")),
            (worst_oracle <= 1e-12, format!("max |vote - loop oracle| = {worst_oracle:.2e} (<= 1e-12)")),
            (rescale_mismatch == 0, format!("{rescale_mismatch} predictions changed under alpha in {{0.01,1,100}}")),
            (elapsed < Duration::from_secs(5), format!("{:.2}s (< 5s)", elapsed.as_secs_f64())),
        ],
    )
}

/// Precision/recall/F1/support straight from the label pairs.
struct CountingOracle {
    per_class: Vec<(f64, f64, f64, u64)>,
    macro_avg: [f64; 3],
    weighted_avg: [f64; 3],
    accuracy: f64,
}

fn counting_oracle(truth: &[usize], pred: &[usize], c: usize) -> CountingOracle {
    let (mut tp, mut fp, mut fneg) = (vec![0u64; c], vec![0u64; c], vec![0u64; c]);
    let mut hits = 0u64;
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
            hits += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<(f64, f64, f64, u64)> = (0..c)
        .map(|k| {
            let p = div(tp[k], tp[k] + fp[k]);
            let r = div(tp[k], tp[k] + fneg[k]);
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f, tp[k] + fneg[k])
        })
        .collect();
    let n = truth.len() as f64;
    let mut macro_avg = [0.0; 3];
    let mut weighted_avg = [0.0; 3];
    for &(p, r, f, s) in &per_class {
        for (j, v) in [p, r, f].into_iter().enumerate() {
            macro_avg[j] += v / c as f64;
            weighted_avg[j] += v * s as f64 / n;
        }
    }
    CountingOracle {
        per_class,
        macro_avg,
        weighted_avg,
        accuracy: hits as f64 / n,
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = 15;
    let mut worst = 0.0f64;
    let mut support_mismatch = 0usize;
    let mut recall_not_exact = 0usize;
    for _ in 0..200 {
        let hit_rate = rng.random_range(0.0..1.0);
        // Draw truth from a skewed distribution so some classes are rare or absent.
        let skew: Vec<f64> = (0..c).map(|_| rng.random::<f64>().powi(3)).collect();
        let skew_total: f64 = skew.iter().sum();
        let truth: Vec<usize> = (0..500)
            .map(|_| {
                let mut u = rng.random::<f64>() * skew_total;
                skew.iter().position(|&s| {
                    u -= s;
                    u <= 0.0
                })
                .unwrap_or(c - 1)
            })
            .collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(hit_rate) { t } else { rng.random_range(0..c) })
            .collect();
        let rep = report(&confusion(&truth, &pred, c).unwrap());
        let o = counting_oracle(&truth, &pred, c);
        for (m, &(p, r, f, s)) in rep.per_class.iter().zip(&o.per_class) {
            worst = worst.max((m.precision - p).abs()).max((m.recall - r).abs()).max((m.f1 - f).abs());
            support_mismatch += usize::from(m.support != s);
        }
        let ours = [
            rep.macro_avg.precision,
            rep.macro_avg.recall,
            rep.macro_avg.f1,
            rep.weighted_avg.precision,
            rep.weighted_avg.recall,
            rep.weighted_avg.f1,
            rep.overall_accuracy,
        ];
        let theirs = [
            o.macro_avg[0],
            o.macro_avg[1],
            o.macro_avg[2],
            o.weighted_avg[0],
            o.weighted_avg[1],
            o.weighted_avg[2],
            o.accuracy,
        ];
        for (a, b) in ours.iter().zip(&theirs) {
            worst = worst.max((a - b).abs());
        }
        recall_not_exact += usize::from(rep.weighted_avg.recall != rep.overall_accuracy);
    }
    let elapsed = start.elapsed();
    outcome(
        "2",
        "metrics oracle equivalence",
        vec![
            (worst <= 1e-9, format!("max deviation from counting oracle = {worst:.2e} (<= 1e-9)")),
            (support_mismatch == 0, format!("{support_mismatch} support mismatches")),
            (recall_not_exact == 0, format!("weighted recall != accuracy in {recall_not_exact} of 200")),
            (elapsed < Duration::from_secs(10), format!("{:.2}s (< 10s)", elapsed.as_secs_f64())),
        ],
    )
}

struct Sleeper<'a> {
    clock: &'a FakeClock,
    ms: f64,
}

impl Predictor for Sleeper<'_> {
    fn tag(&self) -> String {
        format!("{}ms", self.ms)
    }

    fn predict_one(&self, _image: ArrayView3<f32>) -> leafvote::Result<Array1<f64>> {
        self.clock.advance(Duration::from_secs_f64(self.ms / 1000.0));
        Ok(Array1::from_elem(15, 1.0 / 15.0))
    }
}

fn criterion_3() -> Outcome {
    let table = [(4.1, 244), (6.2, 161), (8.5, 118), (18.8, 53)];
    let mut checks: Vec<(bool, String)> = table
        .iter()
        .map(|&(ms, want)| {
            let got = fps_from_latency(ms).unwrap();
            (got == want, format!("{ms} ms -> {got} fps (want {want})"))
        })
        .collect();
    let clock = FakeClock::default();
    let members = [
        Sleeper { clock: &clock, ms: 4.1 },
        Sleeper { clock: &clock, ms: 6.2 },
        Sleeper { clock: &clock, ms: 8.5 },
    ];
    let refs: Vec<&dyn Predictor> = members.iter().map(|m| m as &dyn Predictor).collect();
    let images = vec![Array3::<f32>::zeros((3, 4, 4)); 20];
    let opts = BenchOptions {
        samples: 20,
        warmup: 5,
        concurrent: false,
    };
    let res = bench_ensemble(&refs, &images, &opts, &clock).unwrap();
    let err = (res.mean_latency_ms - 18.8).abs();
    checks.push((err <= 1e-6, format!("fake-clock ensemble mean {:.9} ms vs 18.8 (|err| {err:.1e} <= 1e-6)", res.mean_latency_ms)));
    outcome("3", "latency table arithmetic", checks)
}

const PLANTVILLAGE_SIZES: [usize; 15] = [997, 1478, 1000, 1000, 152, 2127, 1000, 1909, 952, 1771, 1676, 1404, 3208, 373, 1591];

fn criterion_4() -> Outcome {
    let registry = LabelRegistry::plantvillage();
    let mut files = Vec::new();
    for (class, &n) in PLANTVILLAGE_SIZES.iter().enumerate() {
        let name = registry.name(class).unwrap();
        assert_eq!(name, PLANTVILLAGE_CLASSES[class]);
        for i in 0..n {
            files.push((format!("{name}/image_{i:05}.JPG"), class));
        }
    }
    let total: usize = PLANTVILLAGE_SIZES.iter().sum();
    let ratios = SplitRatios::default();
    let a = make_split(&files, &registry, ratios, 42).unwrap();
    files.reverse();
    let b = make_split(&files, &registry, ratios, 42).unwrap();
    let identical = a.to_file_string() == b.to_file_string();

    let target = [0.70, 0.15, 0.15];
    let mut worst_excess = f64::NEG_INFINITY;
    for (class, counts) in a.class_counts(15).iter().enumerate() {
        let n = PLANTVILLAGE_SIZES[class] as f64;
        for (got, want) in counts.iter().zip(target) {
            worst_excess = worst_excess.max((*got as f64 / n - want).abs() - 1.0 / n);
        }
    }
    let test = a.count(Split::Test);
    outcome(
        "4",
        "split determinism and stratification",
        vec![
            (a.entries.len() == total, format!("{total} files listed")),
            (identical, "two invocations give byte-identical manifests".to_string()),
            (worst_excess <= 0.0, format!("max per-class |fraction - target| - 1/n = {worst_excess:.2e} (<= 0)")),
            (test.abs_diff(3097) <= 15, format!("test images = {test} (3097 +/- 15)")),
        ],
    )
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let fixture = TintedNoise::new(&["alpha", "beta", "gamma"], 20);
    let source = fixture.to_memory();
    let registry = LabelRegistry::build(&fixture.class_names).unwrap();
    let manifest = make_split(&fixture.listing(), &registry, SplitRatios::default(), 42).unwrap();
    let provider = RandomBackboneProvider::default();
    let pp = PreprocessConfig::default();
    let mut checks = Vec::new();
    for arch in Arch::ALL {
        let before = build_model(ModelSpec::new(arch, 3), &provider, 42).unwrap();
        let checksum = before.backbone().checksum();
        let probe = leafvote::data::preprocess(fixture_image(&source).view(), &pp).unwrap();
        let probe_features = before.features(probe.view()).unwrap();
        let (after, history) = train(before.clone(), &manifest, &source, &pp, &TrainConfig::default()).unwrap();
        let backbone_same = after.backbone().checksum() == checksum && after.backbone_checksum() == checksum;
        let features_same = after.features(probe.view()).unwrap() == probe_features;
        let head_changed = after.head().weights() != before.head().weights() && after.head().bias() != before.head().bias();
        checks.push((
            backbone_same && features_same && head_changed && history.epochs.len() == 10 && !after.backbone_trainable(),
            format!(
                "{}: checksum {} after 10 epochs, features {}, head {}",
                arch.tag(),
                if backbone_same { "unchanged" } else { "CHANGED" },
                if features_same { "unchanged" } else { "CHANGED" },
                if head_changed { "updated" } else { "NOT updated" },
            ),
        ));
    }
    let elapsed = start.elapsed();
    checks.push((elapsed < Duration::from_secs(120), format!("{:.1}s (< 120s)", elapsed.as_secs_f64())));
    outcome("5", "frozen backbone", checks)
}

fn fixture_image(source: &leafvote::data::MemorySource) -> Array3<f32> {
    use leafvote::data::ImageSource;
    source.load("beta/img_0003.png").unwrap()
}

const EXPECTED_ARTIFACTS: [&str; 21] = [
    "registry.txt",
    "manifest.csv",
    "checkpoints/resnet50.json",
    "checkpoints/resnet50_history.csv",
    "checkpoints/efficientnet_b0.json",
    "checkpoints/efficientnet_b0_history.csv",
    "checkpoints/densenet121.json",
    "checkpoints/densenet121_history.csv",
    "caches/resnet50.csv",
    "caches/efficientnet_b0.csv",
    "caches/densenet121.csv",
    "caches/ensemble.csv",
    "metrics/report.csv",
    "metrics/report.json",
    "metrics/confusion.csv",
    "metrics/crop_report.csv",
    "ablation_grid.csv",
    "bench.csv",
    "figures/confusion_heatmap.svg",
    "figures/model_comparison.svg",
    "run_summary.json",
];

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    TintedNoise::new(&PLANTVILLAGE_CLASSES, 30).write(&data).unwrap();
    let out = dir.path().join("run");
    let config = format!("dataset_root = {:?}\noutput_dir = {:?}\n", data, out);
    let cfg = PipelineConfig::from_toml(&config).unwrap();

    let start = Instant::now();
    let summary = match run_pipeline(&cfg) {
        Ok(s) => s,
        Err(e) => return outcome("6", "end-to-end run", vec![(false, format!("run failed: {e}"))]),
    };
    let elapsed = start.elapsed();
    let missing: Vec<&str> = EXPECTED_ARTIFACTS.iter().copied().filter(|a| !out.join(a).is_file()).collect();
    let on_disk: RunSummary = serde_json::from_str(&std::fs::read_to_string(out.join("run_summary.json")).unwrap()).unwrap();
    let accs: Vec<f64> = summary.models.iter().map(|m| m.test_accuracy).collect();
    let best = accs.iter().copied().fold(0.0, f64::max);
    let worst = accs.iter().copied().chain([summary.ensemble_accuracy]).fold(1.0, f64::min);
    outcome(
        "6",
        "end-to-end run",
        vec![
            (elapsed < Duration::from_secs(600), format!("{:.1}s (< 600s)", elapsed.as_secs_f64())),
            (
                missing.is_empty(),
                if missing.is_empty() {
                    format!("all {} artifacts present", EXPECTED_ARTIFACTS.len())
                } else {
                    format!("artifacts missing: {missing:?}")
                },
            ),
            (
                on_disk.config_hash == cfg.config_hash() && on_disk.split_seed == 42 && on_disk.tool_version == leafvote::VERSION,
                "run summary records config hash, seed and version".to_string(),
            ),
            (
                summary.ensemble_accuracy >= best - 0.02,
                format!("ensemble {:.4} >= best member {best:.4} - 0.02", summary.ensemble_accuracy),
            ),
            (worst >= 0.90, format!("member accuracies {accs:.4?}, min accuracy {worst:.4} (>= 0.90)")),
        ],
    )
}

fn criterion_7() -> Outcome {
    let Some(root) = std::env::var_os("LEAFVOTE_PLANTVILLAGE_ROOT") else {
        return Outcome {
            id: "7",
            name: "full-scale reproduction",
            status: Status::Skip,
            detail: "set LEAFVOTE_PLANTVILLAGE_ROOT (and LEAFVOTE_PROVIDER_CACHE with exported backbones) to run".into(),
        };
    };
    let out = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(Path::new(&root), out.path().join("run"));
    cfg.provider = std::env::var("LEAFVOTE_PROVIDER").unwrap_or_else(|_| "onnx".into());
    let summary = match run_pipeline(&cfg) {
        Ok(s) => s,
        Err(e) => return outcome("7", "full-scale reproduction", vec![(false, format!("run failed: {e}"))]),
    };
    let accs: Vec<f64> = summary.models.iter().map(|m| m.test_accuracy).collect();
    let best = accs.iter().copied().fold(0.0, f64::max);
    outcome(
        "7",
        "full-scale reproduction",
        vec![
            (accs.iter().all(|a| (0.95..=0.98).contains(a)), format!("member accuracies {accs:.4?} in [0.95, 0.98]")),
            (summary.ensemble_accuracy > best, format!("ensemble {:.4} > best member {best:.4}", summary.ensemble_accuracy)),
            (
                true,
                format!(
                    "reference 0.9923 +/- 0.010, observed {:.4} (informational)",
                    summary.ensemble_accuracy
                ),
            ),
        ],
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 300;
    let caches: Vec<ProbabilityMatrix> = ["densenet121", "efficientnet_b0", "resnet50"]
        .iter()
        .map(|t| random_probs(&mut rng, n, 15, t))
        .collect();
    let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..15)).collect();
    let schemes = vec![
        Scheme::Equal,
        Scheme::ValidationWeighted(vec![95.5, 95.3, 96.3]),
        Scheme::Custom(vec![0.5, 0.5, 2.0]),
        Scheme::Custom(vec![2.0, 0.5, 0.5]),
    ];
    let grid = run_grid(&caches, &truth, &schemes).unwrap();
    let tags: Vec<String> = caches.iter().map(|c| c.model_tag().to_string()).collect();
    let full: Vec<_> = grid.rows.iter().filter(|r| r.kind == RowKind::Full).collect();
    let mut worst = 0.0f64;
    for (row, scheme) in full.iter().zip(&schemes) {
        let vote = soft_vote(&caches, &make_scheme(scheme, &tags).unwrap()).unwrap();
        let acc = report(&confusion(&truth, &predict(&vote), 15).unwrap()).overall_accuracy;
        worst = worst.max((row.test_accuracy - acc).abs());
    }
    let expected_rows = 3 + 3 + schemes.len();
    outcome(
        "8",
        "ablation grid consistency",
        vec![
            (grid.rows.len() == expected_rows, format!("{} rows (want {expected_rows})", grid.rows.len())),
            (full.len() == schemes.len(), format!("{} full-ensemble rows", full.len())),
            (worst <= 1e-12, format!("max |grid accuracy - metrics accuracy| = {worst:.1e} (<= 1e-12)")),
        ],
    )
}

#[test]
fn acceptance() {
    // Run every criterion in this one test so timing checks are not skewed by
    // other tests in the same binary.
    println!();
    let outcomes = [
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
        criterion_7(),
        criterion_8(),
    ];
    for o in &outcomes {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        println!("[{tag}] criterion {}: {} -- {}", o.id, o.name, o.detail);
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| o.status == Status::Fail).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

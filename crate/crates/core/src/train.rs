//! Head-only training: Adam on cross-entropy, fixed epoch budget, per-epoch
//! validation, best-validation or final-epoch checkpoint selection.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess, ImageSource, ManifestEntry, PreprocessConfig, Split, SplitManifest};
use crate::ensemble::argmax;
use crate::error::{Error, Result};
use crate::model::{softmax, AdaptedModel};
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointPolicy {
    /// Keep the head from the epoch with the highest validation accuracy
    /// (earliest such epoch on ties).
    #[default]
    BestVal,
    /// Keep the head after the last epoch.
    Final,
}

impl std::str::FromStr for CheckpointPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bestval" | "best_val" | "best-val" => Ok(Self::BestVal),
            "final" | "finalepoch" | "final_epoch" => Ok(Self::Final),
            _ => Err(Error::BadTrainConfig(format!("unknown checkpoint policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub checkpoint_policy: CheckpointPolicy,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 32,
            epochs: 10,
            checkpoint_policy: CheckpointPolicy::BestVal,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::BadTrainConfig(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::BadTrainConfig("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::BadTrainConfig("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_eps <= 0.0 {
            return Err(Error::BadTrainConfig("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_val_accuracy: f64,
    /// 1-based epoch that reached `best_val_accuracy` first.
    pub best_epoch: usize,
    /// Epoch whose head was returned.
    pub selected_epoch: usize,
    pub policy: CheckpointPolicy,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,val_acc` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.val_accuracy).unwrap();
        }
        out
    }

    /// Parses [`Self::to_csv`] output. Best epoch is recomputed from the rows.
    pub fn parse_csv(text: &str, policy: CheckpointPolicy, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,train_loss,val_loss,val_acc") {
            return Err(Error::parse(origin, 1, "bad history header"));
        }
        let mut epochs = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::parse(origin, i + 2, "expected 4 numeric fields");
            let [e, tl, vl, va] = f[..] else { return Err(bad()) };
            epochs.push(EpochRecord {
                epoch: e.parse().map_err(|_| bad())?,
                train_loss: tl.parse().map_err(|_| bad())?,
                val_loss: vl.parse().map_err(|_| bad())?,
                val_accuracy: va.parse().map_err(|_| bad())?,
            });
        }
        Self::from_epochs(epochs, policy).ok_or_else(|| Error::parse(origin, 0, "history has no epochs"))
    }

    fn from_epochs(epochs: Vec<EpochRecord>, policy: CheckpointPolicy) -> Option<Self> {
        let best = epochs
            .iter()
            .fold(None::<&EpochRecord>, |best, e| match best {
                Some(b) if b.val_accuracy >= e.val_accuracy => Some(b),
                _ => Some(e),
            })?
            .to_owned();
        let selected_epoch = match policy {
            CheckpointPolicy::BestVal => best.epoch,
            CheckpointPolicy::Final => epochs.last()?.epoch,
        };
        Some(Self {
            best_val_accuracy: best.val_accuracy,
            best_epoch: best.epoch,
            selected_epoch,
            policy,
            epochs,
        })
    }
}

/// Mean cross-entropy of `labels` under softmax(`logits`).
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    total / labels.len() as f64
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Labeled frozen features for one split.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
}

/// Loads, preprocesses and embeds every entry through the frozen backbone.
pub fn extract_features(
    model: &AdaptedModel,
    entries: &[&ManifestEntry],
    source: &dyn ImageSource,
    pp: &PreprocessConfig,
    exec: Exec,
) -> Result<FeatureSet> {
    let rows = exec.try_map(entries, |e| {
        let img = source.load(&e.path)?;
        let x = preprocess(img.view(), pp)?;
        model.features(x.view())
    })?;
    let dim = model.head().in_dim();
    let mut features = Array2::<f32>::zeros((rows.len(), dim));
    for (mut slot, row) in features.axis_iter_mut(Axis(0)).zip(&rows) {
        slot.assign(row);
    }
    Ok(FeatureSet {
        features,
        labels: entries.iter().map(|e| e.class_id).collect(),
    })
}

/// Trains the head of `model` on the manifest's train split, validating on val.
pub fn train(
    model: AdaptedModel,
    manifest: &SplitManifest,
    source: &dyn ImageSource,
    pp: &PreprocessConfig,
    cfg: &TrainConfig,
) -> Result<(AdaptedModel, TrainHistory)> {
    cfg.validate()?;
    let train_entries: Vec<&ManifestEntry> = manifest.entries_in(Split::Train).collect();
    let val_entries: Vec<&ManifestEntry> = manifest.entries_in(Split::Val).collect();
    if train_entries.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_entries.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let exec = Exec::default();
    let train_set = extract_features(&model, &train_entries, source, pp, exec)?;
    let val_set = extract_features(&model, &val_entries, source, pp, exec)?;
    train_on_features(model, &train_set, &val_set, cfg)
}

struct Adam {
    m_w: Array2<f64>,
    v_w: Array2<f64>,
    m_b: Array1<f64>,
    v_b: Array1<f64>,
    step: i32,
}

impl Adam {
    fn new(out_dim: usize, in_dim: usize) -> Self {
        Self {
            m_w: Array2::zeros((out_dim, in_dim)),
            v_w: Array2::zeros((out_dim, in_dim)),
            m_b: Array1::zeros(out_dim),
            v_b: Array1::zeros(out_dim),
            step: 0,
        }
    }

    fn update(&mut self, cfg: &TrainConfig, w: &mut Array2<f64>, b: &mut Array1<f64>, gw: &Array2<f64>, gb: &Array1<f64>) {
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = cfg.learning_rate;
        let eps = cfg.adam_eps;
        let apply = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        ndarray::Zip::from(w).and(&mut self.m_w).and(&mut self.v_w).and(gw).for_each(|p, m, v, &g| apply(p, m, v, g));
        ndarray::Zip::from(b).and(&mut self.m_b).and(&mut self.v_b).and(gb).for_each(|p, m, v, &g| apply(p, m, v, g));
    }
}

fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let correct = probs
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(row.as_slice().expect("row-major")) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Trains on precomputed features. Only the head changes.
pub fn train_on_features(
    mut model: AdaptedModel,
    train_set: &FeatureSet,
    val_set: &FeatureSet,
    cfg: &TrainConfig,
) -> Result<(AdaptedModel, TrainHistory)> {
    cfg.validate()?;
    if train_set.labels.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_set.labels.is_empty() {
        return Err(Error::EmptySplit("val"));
    }
    let num_classes = model.head().out_dim();
    for &y in train_set.labels.iter().chain(&val_set.labels) {
        if y >= num_classes {
            return Err(Error::UnknownClass { id: y, num_classes });
        }
    }

    let n = train_set.labels.len();
    let mut adam = Adam::new(num_classes, model.head().in_dim());
    let mut order: Vec<usize> = (0..n).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, crate::model::LinearHead)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(model.head_seed());
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = train_set.features.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let logits = model.head.logits(x.view());
            let loss = cross_entropy(logits.view(), &y);
            if !loss.is_finite() {
                return Err(Error::DivergedTraining { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;

            let mut grad = logits;
            for (mut row, &label) in grad.axis_iter_mut(Axis(0)).zip(&y) {
                softmax(row.as_slice_mut().expect("row-major"));
                row[label] -= 1.0;
            }
            grad /= batch.len() as f64;
            let gw = grad.t().dot(&x.mapv(f64::from));
            let gb = grad.sum_axis(Axis(0));
            let head = &mut model.head;
            adam.update(cfg, &mut head.weights, &mut head.bias, &gw, &gb);
        }

        let val_logits = model.head.logits(val_set.features.view());
        let val_loss = cross_entropy(val_logits.view(), &val_set.labels);
        if !val_loss.is_finite() {
            return Err(Error::DivergedTraining { epoch, loss: val_loss });
        }
        let val_accuracy = accuracy(&model.probs_from_features(val_set.features.view())?, &val_set.labels);
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            val_accuracy,
        });
        if best.as_ref().is_none_or(|(acc, _)| val_accuracy > *acc) {
            best = Some((val_accuracy, model.head.clone()));
        }
    }

    let history = TrainHistory::from_epochs(records, cfg.checkpoint_policy).expect("epochs >= 1");
    if cfg.checkpoint_policy == CheckpointPolicy::BestVal {
        model.head = best.expect("epochs >= 1").1;
    }
    Ok((model, history))
}

/// Accuracy of `model` on a feature set, through the same path as inference.
pub fn evaluate(model: &AdaptedModel, set: &FeatureSet) -> Result<f64> {
    Ok(accuracy(&model.probs_from_features(set.features.view())?, &set.labels))
}

//! Confusion matrices, per-class reports and crop roll-ups.
//!
//! Zero denominators yield 0: a class that is never predicted has precision
//! 0, a class with no support has recall 0, and F1 is 0 when precision and
//! recall are both 0.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Crop, LabelRegistry};

/// `counts[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::BadProbabilities("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn row_sum(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn col_sum(&self, class: usize) -> u64 {
        self.counts.iter().map(|r| r[class]).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|c| self.counts[c][c]).sum()
    }

    /// CSV with a class-name header row and one row per true class.
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::from("true\\pred");
        for n in names {
            write!(out, ",{n}").unwrap();
        }
        out.push('\n');
        for (name, row) in names.iter().zip(&self.counts) {
            out.push_str(name);
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses [`Self::to_csv`] output into (class names, matrix).
    pub fn parse_csv(text: &str, origin: &Path) -> Result<(Vec<String>, Self)> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(origin, 1, "missing header"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("true\\pred") {
            return Err(Error::parse(origin, 1, "header must start with `true\\pred`"));
        }
        let names: Vec<String> = cols.map(String::from).collect();
        let mut counts = Vec::with_capacity(names.len());
        for (i, line) in lines.enumerate() {
            let mut f = line.split(',');
            if f.next() != Some(names.get(i).map(String::as_str).unwrap_or("")) {
                return Err(Error::parse(origin, i + 2, "row label does not match header order"));
            }
            let row: Vec<u64> = f
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(origin, i + 2, "bad count"))?;
            if row.len() != names.len() {
                return Err(Error::parse(origin, i + 2, "wrong number of columns"));
            }
            counts.push(row);
        }
        if counts.len() != names.len() {
            return Err(Error::parse(origin, 0, "matrix is not square"));
        }
        Ok((names, Self { counts }))
    }
}

/// Counts (truth, prediction) pairs.
pub fn confusion(truth: &[usize], pred: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::zeros(num_classes);
    for (&t, &p) in truth.iter().zip(pred) {
        if let Some(id) = [t, p].into_iter().find(|&id| id >= num_classes) {
            return Err(Error::UnknownClass { id, num_classes });
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub overall_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class precision/recall/F1/support plus macro and weighted means.
pub fn report(cm: &ConfusionMatrix) -> MetricsReport {
    let c = cm.num_classes();
    let total = cm.total();
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let precision = ratio(tp, cm.col_sum(k));
            let recall = ratio(tp, cm.row_sum(k));
            ClassMetrics {
                precision,
                recall,
                f1: harmonic(precision, recall),
                support: cm.row_sum(k),
            }
        })
        .collect();

    let mean = |f: fn(&ClassMetrics) -> f64| {
        if c == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / c as f64
        }
    };
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        if total == 0 {
            0.0
        } else {
            per_class.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / total as f64
        }
    };
    let overall_accuracy = ratio(cm.trace(), total);
    MetricsReport {
        macro_avg: Averages {
            precision: mean(|m| m.precision),
            recall: mean(|m| m.recall),
            f1: mean(|m| m.f1),
        },
        weighted_avg: Averages {
            precision: weighted(|m| m.precision),
            // Σ support·(tp/support) / total reduces to trace / total; computing
            // it that way keeps it bit-identical to the accuracy.
            recall: overall_accuracy,
            f1: weighted(|m| m.f1),
        },
        overall_accuracy,
        per_class,
        confusion: cm.clone(),
    }
}

impl MetricsReport {
    /// Per-class table at 3 decimals:
    /// `class,precision,recall,f1-score,support`, then `accuracy`,
    /// `macro avg` and `weighted avg` rows (support column = total).
    pub fn to_csv(&self, names: &[&str]) -> String {
        let mut out = String::from("class,precision,recall,f1-score,support\n");
        for (name, m) in names.iter().zip(&self.per_class) {
            writeln!(out, "{name},{:.3},{:.3},{:.3},{}", m.precision, m.recall, m.f1, m.support).unwrap();
        }
        let total = self.confusion.total();
        writeln!(out, "accuracy,,,{:.3},{total}", self.overall_accuracy).unwrap();
        for (label, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            writeln!(out, "{label},{:.3},{:.3},{:.3},{total}", a.precision, a.recall, a.f1).unwrap();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Rows of a per-class CSV read back at its printed precision.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub classes: Vec<(String, ClassMetrics)>,
    pub accuracy: f64,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub total: u64,
}

impl ReportTable {
    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some("class,precision,recall,f1-score,support") {
            return Err(Error::parse(origin, 1, "bad report header"));
        }
        let mut classes = Vec::new();
        let mut accuracy = None;
        let mut aggregates = BTreeMap::new();
        let mut total = 0;
        for (i, line) in lines {
            let bad = || Error::parse(origin, i + 1, "malformed report row");
            let f: Vec<&str> = line.split(',').collect();
            let [name, p, r, f1, support] = f[..] else { return Err(bad()) };
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let support: u64 = support.parse().map_err(|_| bad())?;
            match name {
                "accuracy" => {
                    accuracy = Some(num(f1)?);
                    total = support;
                }
                "macro avg" | "weighted avg" => {
                    aggregates.insert(name, Averages {
                        precision: num(p)?,
                        recall: num(r)?,
                        f1: num(f1)?,
                    });
                }
                _ => classes.push((name.to_string(), ClassMetrics {
                    precision: num(p)?,
                    recall: num(r)?,
                    f1: num(f1)?,
                    support,
                })),
            }
        }
        let missing = |what: &str| Error::parse(origin, 0, format!("missing `{what}` row"));
        Ok(Self {
            accuracy: accuracy.ok_or_else(|| missing("accuracy"))?,
            macro_avg: aggregates.remove("macro avg").ok_or_else(|| missing("macro avg"))?,
            weighted_avg: aggregates.remove("weighted avg").ok_or_else(|| missing("weighted avg"))?,
            classes,
            total,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1-score,support\n");
        for (name, m) in &self.classes {
            writeln!(out, "{name},{:.3},{:.3},{:.3},{}", m.precision, m.recall, m.f1, m.support).unwrap();
        }
        writeln!(out, "accuracy,,,{:.3},{}", self.accuracy, self.total).unwrap();
        for (label, a) in [("macro avg", &self.macro_avg), ("weighted avg", &self.weighted_avg)] {
            writeln!(out, "{label},{:.3},{:.3},{:.3},{}", a.precision, a.recall, a.f1, self.total).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRow {
    pub crop: Crop,
    pub num_classes: usize,
    pub num_images: u64,
    pub correct: u64,
    /// `None` when the crop has no test images.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropReport {
    pub crops: Vec<CropRow>,
    pub num_classes: usize,
    pub num_images: u64,
    pub correct: u64,
    pub overall_accuracy: Option<f64>,
}

/// Accuracy per crop over images whose TRUE class belongs to that crop.
pub fn crop_report(cm: &ConfusionMatrix, registry: &LabelRegistry) -> Result<CropReport> {
    if registry.len() != cm.num_classes() {
        return Err(Error::AlignmentError(format!(
            "registry has {} classes, confusion matrix {}",
            registry.len(),
            cm.num_classes()
        )));
    }
    let crops: Vec<CropRow> = registry
        .crop_index()
        .iter()
        .map(|(crop, ids)| {
            let num_images: u64 = ids.iter().map(|&c| cm.row_sum(c)).sum();
            let correct: u64 = ids.iter().map(|&c| cm.get(c, c)).sum();
            CropRow {
                crop: *crop,
                num_classes: ids.len(),
                num_images,
                correct,
                accuracy: (num_images > 0).then(|| correct as f64 / num_images as f64),
            }
        })
        .collect();
    let num_images = cm.total();
    let correct = cm.trace();
    Ok(CropReport {
        crops,
        num_classes: registry.len(),
        num_images,
        correct,
        overall_accuracy: (num_images > 0).then(|| correct as f64 / num_images as f64),
    })
}

fn pct(a: Option<f64>) -> String {
    a.map_or_else(|| "undefined".to_string(), |a| format!("{:.2}", 100.0 * a))
}

impl CropReport {
    /// `crop,classes,test_images,correct,accuracy_pct` with an `Overall` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("crop,classes,test_images,correct,accuracy_pct\n");
        for r in &self.crops {
            writeln!(out, "{},{},{},{},{}", r.crop, r.num_classes, r.num_images, r.correct, pct(r.accuracy)).unwrap();
        }
        writeln!(
            out,
            "Overall,{},{},{},{}",
            self.num_classes,
            self.num_images,
            self.correct,
            pct(self.overall_accuracy)
        )
        .unwrap();
        out
    }

    /// Reads [`Self::to_csv`] back; accuracies are recomputed from the counts.
    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some("crop,classes,test_images,correct,accuracy_pct") {
            return Err(Error::parse(origin, 1, "bad crop report header"));
        }
        let mut crops = Vec::new();
        let mut overall = None;
        for (i, line) in lines {
            let bad = || Error::parse(origin, i + 1, "malformed crop row");
            let f: Vec<&str> = line.split(',').collect();
            let [name, classes, images, correct, _] = f[..] else { return Err(bad()) };
            let classes: usize = classes.parse().map_err(|_| bad())?;
            let images: u64 = images.parse().map_err(|_| bad())?;
            let correct: u64 = correct.parse().map_err(|_| bad())?;
            let accuracy = (images > 0).then(|| correct as f64 / images as f64);
            if name == "Overall" {
                overall = Some((classes, images, correct, accuracy));
            } else {
                crops.push(CropRow {
                    crop: name.parse().map_err(|e: String| Error::parse(origin, i + 1, e))?,
                    num_classes: classes,
                    num_images: images,
                    correct,
                    accuracy,
                });
            }
        }
        let (num_classes, num_images, correct, overall_accuracy) =
            overall.ok_or_else(|| Error::parse(origin, 0, "missing Overall row"))?;
        Ok(Self {
            crops,
            num_classes,
            num_images,
            correct,
            overall_accuracy,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[0, 1], &[0, 1], 2).unwrap().counts(), &[vec![1, 0], vec![0, 1]]);
        assert_eq!(confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap().counts(), &[vec![1, 1], vec![0, 1]]);
        assert_eq!(confusion(&[], &[], 3).unwrap(), ConfusionMatrix::zeros(3));
        assert!(matches!(confusion(&[0], &[], 2), Err(Error::LengthMismatch { truth: 1, pred: 0 })));
        assert!(matches!(confusion(&[0], &[2], 2), Err(Error::UnknownClass { id: 2, .. })));
    }

    #[test]
    fn report_example() {
        let r = report(&confusion(&[0, 0, 1], &[0, 1, 1], 2).unwrap());
        let (a, b) = (r.per_class[0], r.per_class[1]);
        assert!(close(a.precision, 1.0) && close(a.recall, 0.5) && close(a.f1, 2.0 / 3.0));
        assert!(close(b.precision, 0.5) && close(b.recall, 1.0) && close(b.f1, 2.0 / 3.0));
        assert_eq!((a.support, b.support), (2, 1));
        assert!(close(r.overall_accuracy, 2.0 / 3.0));
        assert!(close(r.macro_avg.precision, 0.75));
        assert!(close(r.weighted_avg.precision, (2.0 * 1.0 + 0.5) / 3.0));
    }

    #[test]
    fn perfect_and_empty() {
        let r = report(&confusion(&[0, 1, 2, 2], &[0, 1, 2, 2], 3).unwrap());
        assert!(r.per_class.iter().all(|m| m.precision == 1.0 && m.recall == 1.0 && m.f1 == 1.0));
        assert_eq!(r.overall_accuracy, 1.0);
        let empty = report(&ConfusionMatrix::zeros(4));
        assert_eq!(empty.overall_accuracy, 0.0);
        assert!(empty.per_class.iter().all(|m| m.f1 == 0.0));
    }

    #[test]
    fn never_predicted_class_has_zero_precision() {
        let r = report(&confusion(&[0, 1], &[0, 0], 2).unwrap());
        assert_eq!(r.per_class[1].precision, 0.0);
        assert_eq!(r.per_class[1].f1, 0.0);
    }

    #[test]
    fn equal_supports_make_macro_equal_weighted() {
        let r = report(&confusion(&[0, 0, 1, 1, 2, 2], &[0, 1, 1, 2, 2, 0], 3).unwrap());
        assert!(close(r.macro_avg.precision, r.weighted_avg.precision));
        assert!(close(r.macro_avg.recall, r.weighted_avg.recall));
        assert!(close(r.macro_avg.f1, r.weighted_avg.f1));
    }

    #[test]
    fn crop_rollup() {
        let reg = LabelRegistry::plantvillage();
        let potato = reg.id_of("Potato___healthy").unwrap();
        let tomato = reg.id_of("Tomato_healthy").unwrap();
        let pepper = reg.id_of("Pepper__bell___healthy").unwrap();
        let truth = vec![potato, potato, tomato, tomato, pepper];
        let perfect = crop_report(&confusion(&truth, &truth, 15).unwrap(), &reg).unwrap();
        assert!(perfect.crops.iter().all(|r| r.accuracy == Some(1.0)));

        let pred = vec![potato, tomato, tomato, tomato, pepper];
        let cr = crop_report(&confusion(&truth, &pred, 15).unwrap(), &reg).unwrap();
        let get = |c: Crop| cr.crops.iter().find(|r| r.crop == c).unwrap().clone();
        assert_eq!(get(Crop::Potato).accuracy, Some(0.5));
        assert_eq!(get(Crop::Tomato).accuracy, Some(1.0));
        assert_eq!(get(Crop::Tomato).num_images, 2);
        assert_eq!(cr.overall_accuracy, Some(0.8));
    }

    #[test]
    fn crop_without_images_is_flagged() {
        let reg = LabelRegistry::build(&["Pepper_a", "Tomato_b"]).unwrap();
        let cr = crop_report(&confusion(&[1], &[1], 2).unwrap(), &reg).unwrap();
        assert_eq!(cr.crops[0].accuracy, None);
        assert!(cr.to_csv().contains("Pepper,1,0,0,undefined"));
        let back = CropReport::parse_csv(&cr.to_csv(), Path::new("mem")).unwrap();
        assert_eq!(back, cr);
    }

    #[test]
    fn tomato_block_percentage() {
        // 2401 of 2425 correct
        let reg = LabelRegistry::build(&["Tomato_a", "Tomato_b"]).unwrap();
        let cm = ConfusionMatrix::from_counts(vec![vec![1200, 12], vec![12, 1201]]).unwrap();
        let cr = crop_report(&cm, &reg).unwrap();
        assert_eq!(cr.crops[0].num_images, 2425);
        assert!(cr.to_csv().contains("Tomato,2,2425,2401,99.01"));
    }

    #[test]
    fn csv_roundtrips() {
        let cm = confusion(&[0, 0, 1, 2], &[0, 1, 1, 2], 3).unwrap();
        let names = ["a", "b", "c"];
        let (n, back) = ConfusionMatrix::parse_csv(&cm.to_csv(&names), Path::new("mem")).unwrap();
        assert_eq!(n, names);
        assert_eq!(back, cm);

        let r = report(&cm);
        let csv = r.to_csv(&names);
        let table = ReportTable::parse_csv(&csv, Path::new("mem")).unwrap();
        assert_eq!(table.to_csv(), csv);
        assert_eq!(table.total, 4);
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}

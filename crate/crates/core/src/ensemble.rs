//! Weighted soft voting over cached probability matrices.
//!
//! The combined probability of class `c` for row `r` is
//! `Σ_i w_i · P_i[r, c] / Σ_i w_i`, so only the relative size of the weights
//! matters. Predictions take the lowest class index among tied maxima.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::par::Exec;

/// Tolerance on row sums accepted for member matrices.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// N×C row-stochastic matrix with one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    values: Array2<f64>,
    image_ids: Vec<String>,
    model_tag: String,
}

impl ProbabilityMatrix {
    pub fn new(values: Array2<f64>, image_ids: Vec<String>, model_tag: impl Into<String>) -> Result<Self> {
        let model_tag = model_tag.into();
        let (n, c) = values.dim();
        if n == 0 || c == 0 {
            return Err(Error::BadProbabilities("matrix must have at least one row and column".into()));
        }
        if image_ids.len() != n {
            return Err(Error::BadProbabilities(format!("{} image ids for {n} rows", image_ids.len())));
        }
        if model_tag.is_empty() || model_tag.contains(char::is_whitespace) {
            return Err(Error::BadProbabilities(format!("invalid model tag {model_tag:?}")));
        }
        for (r, row) in values.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::BadProbabilities(format!("row {r} has a negative or non-finite entry")));
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::BadProbabilities(format!("row {r} sums to {sum}")));
            }
        }
        Ok(Self {
            values,
            image_ids,
            model_tag,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn model_tag(&self) -> &str {
        &self.model_tag
    }

    pub fn num_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.model_tag = tag.into();
        self
    }

    /// Rows reordered so image ids are ascending.
    pub fn sorted_by_id(&self) -> Self {
        let mut order: Vec<usize> = (0..self.num_rows()).collect();
        order.sort_by(|&a, &b| self.image_ids[a].cmp(&self.image_ids[b]));
        Self {
            values: self.values.select(Axis(0), &order),
            image_ids: order.iter().map(|&i| self.image_ids[i].clone()).collect(),
            model_tag: self.model_tag.clone(),
        }
    }
}

/// Nonnegative per-model weights, aligned with model tags.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleWeights {
    weights: Vec<f64>,
    tags: Vec<String>,
}

impl EnsembleWeights {
    /// `tags` may be empty to skip tag alignment checks.
    pub fn new(weights: Vec<f64>, tags: Vec<String>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::BadWeights("no weights".into()));
        }
        if !tags.is_empty() && tags.len() != weights.len() {
            return Err(Error::BadWeights(format!("{} weights for {} tags", weights.len(), tags.len())));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::BadWeights(format!("weight {w} is negative or non-finite")));
        }
        if weights.iter().all(|w| *w == 0.0) {
            return Err(Error::DegenerateWeights);
        }
        Ok(Self { weights, tags })
    }

    pub fn equal(m: usize) -> Result<Self> {
        Self::new(vec![1.0; m], Vec::new())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Same weights multiplied by `alpha > 0`.
    pub fn scaled(&self, alpha: f64) -> Result<Self> {
        Self::new(self.weights.iter().map(|w| w * alpha).collect(), self.tags.clone())
    }
}

/// Named weighting rules.
#[derive(Debug, Clone, PartialEq)]
pub enum Scheme {
    Equal,
    /// Weights are the members' validation accuracies, in percent.
    ValidationWeighted(Vec<f64>),
    Custom(Vec<f64>),
}

impl Scheme {
    pub fn label(&self) -> String {
        let list = |w: &[f64]| w.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(";");
        match self {
            Scheme::Equal => "equal".to_string(),
            Scheme::ValidationWeighted(a) => format!("valweighted[{}]", list(a)),
            Scheme::Custom(w) => format!("custom[{}]", list(w)),
        }
    }

    /// Parses a comma-separated scheme list such as
    /// `equal,valweighted:95.5,95.3,96.3,custom:0.5,0.5,2.0`.
    /// A token starting with a letter opens a new scheme; numeric tokens
    /// extend the current one. `;` and whitespace also separate tokens.
    pub fn parse_list(spec: &str) -> Result<Vec<Scheme>> {
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        for raw in spec.split([',', ';', ' ']).filter(|t| !t.is_empty()) {
            let (name, first) = match raw.split_once(':') {
                Some((n, v)) => (Some(n), Some(v)),
                None if raw.starts_with(|c: char| c.is_ascii_alphabetic()) => (Some(raw), None),
                None => (None, Some(raw)),
            };
            if let Some(name) = name {
                out.push((name.to_ascii_lowercase(), Vec::new()));
            }
            if let Some(v) = first.filter(|v| !v.is_empty()) {
                let value: f64 = v.parse().map_err(|_| Error::BadWeights(format!("bad number `{v}` in `{spec}`")))?;
                out.last_mut()
                    .ok_or_else(|| Error::BadWeights(format!("`{spec}` must start with a scheme name")))?
                    .1
                    .push(value);
            }
        }
        out.into_iter()
            .map(|(name, values)| match name.as_str() {
                "equal" if values.is_empty() => Ok(Scheme::Equal),
                "valweighted" | "validation" | "validation-weighted" => Ok(Scheme::ValidationWeighted(values)),
                "custom" => Ok(Scheme::Custom(values)),
                _ => Err(Error::BadWeights(format!("unknown scheme `{name}`"))),
            })
            .collect()
    }
}

/// Turns a named scheme into weights for the members with tags `tags`.
pub fn make_scheme(scheme: &Scheme, tags: &[String]) -> Result<EnsembleWeights> {
    let m = tags.len();
    let check_len = |v: &[f64]| {
        if v.len() == m {
            Ok(())
        } else {
            Err(Error::BadWeights(format!("{} weights for {m} models", v.len())))
        }
    };
    match scheme {
        Scheme::Equal => EnsembleWeights::new(vec![1.0; m], tags.to_vec()),
        Scheme::ValidationWeighted(accs) => {
            check_len(accs)?;
            if let Some(a) = accs.iter().find(|a| !(**a > 0.0 && **a <= 100.0)) {
                return Err(Error::BadAccuracy(*a));
            }
            EnsembleWeights::new(accs.clone(), tags.to_vec())
        }
        Scheme::Custom(w) => {
            check_len(w)?;
            EnsembleWeights::new(w.clone(), tags.to_vec())
        }
    }
}

fn check_alignment(matrices: &[&ProbabilityMatrix]) -> Result<()> {
    let first = matrices.first().ok_or_else(|| Error::AlignmentError("no matrices".into()))?;
    for m in &matrices[1..] {
        if m.num_classes() != first.num_classes() {
            return Err(Error::AlignmentError(format!(
                "`{}` has {} classes, `{}` has {}",
                m.model_tag(),
                m.num_classes(),
                first.model_tag(),
                first.num_classes()
            )));
        }
        if m.image_ids != first.image_ids {
            return Err(Error::AlignmentError(format!(
                "`{}` and `{}` list different images or orders",
                m.model_tag(),
                first.model_tag()
            )));
        }
    }
    Ok(())
}

/// Weighted soft vote; the output is tagged `ensemble`.
pub fn soft_vote(matrices: &[ProbabilityMatrix], weights: &EnsembleWeights) -> Result<ProbabilityMatrix> {
    soft_vote_with(matrices, weights, Exec::default())
}

const ROWS_PER_TASK: usize = 512;

pub fn soft_vote_with(matrices: &[ProbabilityMatrix], weights: &EnsembleWeights, exec: Exec) -> Result<ProbabilityMatrix> {
    let refs: Vec<&ProbabilityMatrix> = matrices.iter().collect();
    soft_vote_refs(&refs, weights, exec)
}

fn soft_vote_refs(matrices: &[&ProbabilityMatrix], weights: &EnsembleWeights, exec: Exec) -> Result<ProbabilityMatrix> {
    check_alignment(matrices)?;
    if weights.len() != matrices.len() {
        return Err(Error::AlignmentError(format!(
            "{} weights for {} matrices",
            weights.len(),
            matrices.len()
        )));
    }
    if !weights.tags().is_empty() && matrices.iter().map(|m| m.model_tag()).ne(weights.tags().iter().map(String::as_str)) {
        return Err(Error::AlignmentError("weight tags do not match matrix tags".into()));
    }
    let total: f64 = weights.weights().iter().sum();
    let (n, c) = matrices[0].values.dim();

    let blocks = exec.map_range(n.div_ceil(ROWS_PER_TASK), |b| {
        let rows = b * ROWS_PER_TASK..((b + 1) * ROWS_PER_TASK).min(n);
        let mut acc = Array2::<f64>::zeros((rows.len(), c));
        for (m, &w) in matrices.iter().zip(weights.weights()) {
            acc.scaled_add(w, &m.values.slice(s![rows.clone(), ..]));
        }
        acc /= total;
        acc
    });
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let values = ndarray::concatenate(Axis(0), &views).expect("blocks share width");
    Ok(ProbabilityMatrix {
        values,
        image_ids: matrices[0].image_ids.clone(),
        model_tag: "ensemble".to_string(),
    })
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per row.
pub fn predict(matrix: &ProbabilityMatrix) -> Vec<usize> {
    matrix
        .values
        .rows()
        .into_iter()
        .map(|row| match row.as_slice() {
            Some(s) => argmax(s),
            None => argmax(&row.to_vec()),
        })
        .collect()
}

/// All k-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Equal-weight votes over every k-subset of the members. Members are
/// ordered by tag first, so subsets come out in lexicographic tag order.
pub fn subset_ensembles(matrices: &[ProbabilityMatrix], k: usize) -> Result<Vec<(Vec<String>, ProbabilityMatrix)>> {
    let m = matrices.len();
    if k == 0 || k > m {
        return Err(Error::BadSubsetSize { k, m });
    }
    let mut sorted: Vec<&ProbabilityMatrix> = matrices.iter().collect();
    sorted.sort_by(|a, b| a.model_tag().cmp(b.model_tag()));
    combinations(m, k)
        .into_iter()
        .map(|subset| {
            let members: Vec<&ProbabilityMatrix> = subset.iter().map(|&i| sorted[i]).collect();
            let tags: Vec<String> = members.iter().map(|p| p.model_tag().to_string()).collect();
            let vote = soft_vote_refs(&members, &EnsembleWeights::equal(k)?, Exec::Sequential)?;
            let vote = if k == 1 { vote.with_tag(tags[0].clone()) } else { vote.with_tag(tags.join("+")) };
            Ok((tags, vote))
        })
        .collect()
}

/// A probability matrix persisted next to the registry it was computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityCache {
    pub matrix: ProbabilityMatrix,
    pub registry_hash: String,
}

impl ProbabilityCache {
    /// Header `# model=<tag> classes=<C> registry=<hash>`, then one
    /// `<image_id>,<p0>,…,<pC-1>` line per image sorted by id, 9 decimals.
    pub fn to_file_string(&self) -> Result<String> {
        let m = self.matrix.sorted_by_id();
        let mut out = format!(
            "# model={} classes={} registry={}\n",
            m.model_tag(),
            m.num_classes(),
            self.registry_hash
        );
        for (id, row) in m.image_ids.iter().zip(m.values.rows()) {
            if id.contains([',', '\n', '\r']) {
                return Err(Error::BadPath(id.clone()));
            }
            out.push_str(id);
            for p in row {
                write!(out, ",{p:.9}").unwrap();
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let bad_header = || Error::parse(origin, 1, "expected `# model=<tag> classes=<C> registry=<hash>`");
        let header = lines.next().and_then(|h| h.strip_prefix("# ")).ok_or_else(bad_header)?;
        let fields: Vec<&str> = header.split(' ').collect();
        let [model, classes, registry] = fields[..] else {
            return Err(bad_header());
        };
        let tag = model.strip_prefix("model=").ok_or_else(bad_header)?;
        let num_classes: usize = classes
            .strip_prefix("classes=")
            .and_then(|c| c.parse().ok())
            .ok_or_else(bad_header)?;
        let registry_hash = registry.strip_prefix("registry=").ok_or_else(bad_header)?.to_string();

        let mut ids = Vec::new();
        let mut flat = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut parts = line.split(',');
            let id = parts.next().unwrap_or_default();
            let probs: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(origin, i + 2, "bad probability"))?;
            if probs.len() != num_classes {
                return Err(Error::parse(
                    origin,
                    i + 2,
                    format!("expected {num_classes} probabilities, got {}", probs.len()),
                ));
            }
            ids.push(id.to_string());
            flat.extend(probs);
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::parse(origin, 0, "rows must be sorted by image id without duplicates"));
        }
        let values = Array2::from_shape_vec((ids.len(), num_classes), flat).expect("row lengths checked");
        let matrix = ProbabilityMatrix::new(values, ids, tag).map_err(|e| Error::parse(origin, 0, e.to_string()))?;
        Ok(Self { matrix, registry_hash })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()?).map_err(|e| Error::io(path, e))
    }
}

//! Singleton, pair and weighting-scheme grid over cached probabilities.
//!
//! Row order is fixed: every single member, every 2-subset (both in
//! lexicographic tag order, equal weights), then the full member set under
//! each scheme in the order given. The first scheme's row is the reference
//! for the gap column.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ensemble::{combinations, make_scheme, predict, soft_vote_with, EnsembleWeights, ProbabilityMatrix, Scheme};
use crate::error::{Error, Result};
use crate::metrics::confusion;
use crate::model::Arch;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Single,
    Subset,
    Full,
}

impl RowKind {
    fn as_str(self) -> &'static str {
        match self {
            RowKind::Single => "single",
            RowKind::Subset => "subset",
            RowKind::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub config_name: String,
    pub kind: RowKind,
    pub member_tags: Vec<String>,
    pub weights: Vec<f64>,
    pub correct: u64,
    pub total: u64,
    /// Fraction in [0, 1].
    pub test_accuracy: f64,
    /// `test_accuracy` minus the reference full-ensemble accuracy.
    pub gap_vs_full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub rows: Vec<GridRow>,
}

fn display_tag(tag: &str) -> String {
    tag.parse::<Arch>().map_or_else(|_| tag.to_string(), |a| a.display_name().to_string())
}

fn scheme_name(s: &Scheme) -> String {
    match s {
        Scheme::Equal => "Ensemble (equal weights)".to_string(),
        Scheme::ValidationWeighted(_) => "Ensemble (validation-weighted)".to_string(),
        Scheme::Custom(w) => format!(
            "Ensemble (custom [{}])",
            w.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join("; ")
        ),
    }
}

struct Job<'a> {
    name: String,
    kind: RowKind,
    members: Vec<&'a ProbabilityMatrix>,
    weights: EnsembleWeights,
}

/// Runs the full grid; `truth` is aligned with the caches' rows.
pub fn run_grid(caches: &[ProbabilityMatrix], truth: &[usize], schemes: &[Scheme]) -> Result<AblationGrid> {
    run_grid_with(caches, truth, schemes, Exec::default())
}

pub fn run_grid_with(caches: &[ProbabilityMatrix], truth: &[usize], schemes: &[Scheme], exec: Exec) -> Result<AblationGrid> {
    if caches.len() < 2 {
        return Err(Error::BadSubsetSize { k: 2, m: caches.len() });
    }
    if schemes.is_empty() {
        return Err(Error::BadWeights("at least one weighting scheme is required".into()));
    }
    if truth.len() != caches[0].num_rows() {
        return Err(Error::AlignmentError(format!(
            "{} truth labels for {} cached rows",
            truth.len(),
            caches[0].num_rows()
        )));
    }
    let mut sorted: Vec<&ProbabilityMatrix> = caches.iter().collect();
    sorted.sort_by(|a, b| a.model_tag().cmp(b.model_tag()));
    let tags: Vec<String> = caches.iter().map(|c| c.model_tag().to_string()).collect();

    let mut jobs = Vec::new();
    for k in [1, 2] {
        for subset in combinations(sorted.len(), k) {
            let members: Vec<&ProbabilityMatrix> = subset.iter().map(|&i| sorted[i]).collect();
            let name = members.iter().map(|m| display_tag(m.model_tag())).collect::<Vec<_>>().join(" + ");
            jobs.push(Job {
                name,
                kind: if k == 1 { RowKind::Single } else { RowKind::Subset },
                weights: EnsembleWeights::equal(k)?,
                members,
            });
        }
    }
    for scheme in schemes {
        jobs.push(Job {
            name: scheme_name(scheme),
            kind: RowKind::Full,
            members: caches.iter().collect(),
            weights: make_scheme(scheme, &tags)?,
        });
    }

    let num_classes = caches[0].num_classes();
    let outcomes = exec.try_map(&jobs, |job| {
        let owned: Vec<ProbabilityMatrix> = job.members.iter().map(|m| (*m).clone()).collect();
        let vote = soft_vote_with(&owned, &EnsembleWeights::new(job.weights.weights().to_vec(), vec![])?, Exec::Sequential)?;
        let cm = confusion(truth, &predict(&vote), num_classes)?;
        Ok::<_, Error>((cm.trace(), cm.total()))
    })?;

    let mut rows: Vec<GridRow> = jobs
        .iter()
        .zip(outcomes)
        .map(|(job, (correct, total))| GridRow {
            config_name: job.name.clone(),
            kind: job.kind,
            member_tags: job.members.iter().map(|m| m.model_tag().to_string()).collect(),
            weights: job.weights.weights().to_vec(),
            correct,
            total,
            test_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            gap_vs_full: 0.0,
        })
        .collect();
    fill_gaps(&mut rows);
    Ok(AblationGrid { rows })
}

fn fill_gaps(rows: &mut [GridRow]) {
    let full = rows.iter().find(|r| r.kind == RowKind::Full).map_or(0.0, |r| r.test_accuracy);
    for r in rows.iter_mut() {
        r.gap_vs_full = r.test_accuracy - full;
    }
}

pub const GRID_CSV_HEADER: &str = "config,kind,members,weights,correct,total,test_accuracy_pct,gap_vs_full_pct";

impl AblationGrid {
    /// The reference full-ensemble row.
    pub fn full_row(&self) -> Option<&GridRow> {
        self.rows.iter().find(|r| r.kind == RowKind::Full)
    }

    /// Percentages at 2 decimals; `correct`/`total` keep the exact counts.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{GRID_CSV_HEADER}\n");
        for r in &self.rows {
            let weights: Vec<String> = r.weights.iter().map(|w| format!("{w}")).collect();
            writeln!(
                out,
                "{},{},{},{},{},{},{:.2},{:.2}",
                r.config_name.replace(',', ";"),
                r.kind.as_str(),
                r.member_tags.join("+"),
                weights.join(";"),
                r.correct,
                r.total,
                100.0 * r.test_accuracy,
                100.0 * r.gap_vs_full
            )
            .unwrap();
        }
        out
    }

    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(GRID_CSV_HEADER) {
            return Err(Error::parse(origin, 1, "bad grid header"));
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let bad = || Error::parse(origin, i + 1, "malformed grid row");
            let f: Vec<&str> = line.split(',').collect();
            let [name, kind, members, weights, correct, total, _, _] = f[..] else { return Err(bad()) };
            let kind = match kind {
                "single" => RowKind::Single,
                "subset" => RowKind::Subset,
                "full" => RowKind::Full,
                _ => return Err(bad()),
            };
            let weights: Vec<f64> = weights
                .split(';')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad())?;
            let correct: u64 = correct.parse().map_err(|_| bad())?;
            let total: u64 = total.parse().map_err(|_| bad())?;
            rows.push(GridRow {
                config_name: name.to_string(),
                kind,
                member_tags: members.split('+').map(String::from).collect(),
                weights,
                correct,
                total,
                test_accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
                gap_vs_full: 0.0,
            });
        }
        fill_gaps(&mut rows);
        Ok(Self { rows })
    }
}

//! SVG report figures: the confusion-matrix heatmap and the accuracy bar chart.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::{AblationGrid, RowKind};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const HEATMAP_FILE: &str = "confusion_heatmap.svg";
pub const COMPARISON_FILE: &str = "model_comparison.svg";

/// Fill used for cells with a zero count.
pub const ZERO_COLOR: &str = "#ffffff";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// White-to-dark-blue ramp; exactly zero maps to [`ZERO_COLOR`].
fn heat_color(count: u64, max: u64) -> String {
    if count == 0 || max == 0 {
        return ZERO_COLOR.to_string();
    }
    let t = (count as f64 / max as f64).sqrt();
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(230.0, 8.0), lerp(239.0, 48.0), lerp(250.0, 107.0))
}

pub fn heatmap_svg(report: &MetricsReport, class_names: &[&str]) -> String {
    let cm = &report.confusion;
    let c = cm.num_classes();
    let cell = 36.0;
    let margin_left = 14.0 + 6.5 * class_names.iter().map(|n| n.len()).max().unwrap_or(4) as f64;
    let margin_top = 40.0;
    let margin_bottom = margin_left;
    let width = margin_left + cell * c as f64 + 20.0;
    let height = margin_top + cell * c as f64 + margin_bottom;
    let max = cm.counts().iter().flatten().copied().max().unwrap_or(0);

    let mut s = String::new();
    writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"##
    )
    .unwrap();
    writeln!(
        s,
        r##"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">Confusion matrix (accuracy {:.2}%)</text>"##,
        width / 2.0,
        100.0 * report.overall_accuracy
    )
    .unwrap();
    for t in 0..c {
        for p in 0..c {
            let n = cm.get(t, p);
            let x = margin_left + p as f64 * cell;
            let y = margin_top + t as f64 * cell;
            writeln!(
                s,
                r##"<rect class="cell" x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="{}" stroke="#cccccc"/>"##,
                heat_color(n, max)
            )
            .unwrap();
            let ink = if max > 0 && (n as f64 / max as f64) > 0.35 { "#ffffff" } else { "#000000" };
            writeln!(
                s,
                r##"<text class="count" x="{:.1}" y="{:.1}" text-anchor="middle" fill="{ink}">{n}</text>"##,
                x + cell / 2.0,
                y + cell / 2.0 + 4.0
            )
            .unwrap();
        }
    }
    for (i, name) in class_names.iter().enumerate().take(c) {
        let mid = i as f64 * cell + cell / 2.0;
        writeln!(
            s,
            r##"<text class="ytick" x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            margin_left - 6.0,
            margin_top + mid + 4.0,
            escape(name)
        )
        .unwrap();
        let (x, y) = (margin_left + mid, margin_top + c as f64 * cell + 8.0);
        writeln!(
            s,
            r##"<text class="xtick" x="{x:.1}" y="{y:.1}" text-anchor="end" transform="rotate(-60 {x:.1} {y:.1})">{}</text>"##,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn comparison_svg(grid: &AblationGrid) -> String {
    let n = grid.rows.len();
    let bar = 40.0;
    let gap = 16.0;
    let plot_h = 300.0;
    let left = 60.0;
    let top = 40.0;
    let label_space = 8.0 + 6.0 * grid.rows.iter().map(|r| r.config_name.len()).max().unwrap_or(0) as f64;
    let width = left + n as f64 * (bar + gap) + 20.0;
    let height = top + plot_h + label_space;
    let floor = grid
        .rows
        .iter()
        .map(|r| r.test_accuracy)
        .fold(1.0, f64::min)
        .min(0.9)
        .mul_add(100.0, -1.0)
        .floor()
        .max(0.0);
    let y_of = |pct: f64| top + plot_h * (1.0 - (pct - floor) / (100.0 - floor));

    let mut s = String::new();
    writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"##
    )
    .unwrap();
    writeln!(s, r##"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">Test accuracy by configuration</text>"##, width / 2.0)
        .unwrap();
    writeln!(s, r##"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="#000000"/>"##, top + plot_h).unwrap();
    for tick in 0..=4 {
        let pct = floor + (100.0 - floor) * tick as f64 / 4.0;
        writeln!(
            s,
            r##"<text class="ytick" x="{:.1}" y="{:.1}" text-anchor="end">{pct:.1}%</text>"##,
            left - 4.0,
            y_of(pct) + 4.0
        )
        .unwrap();
    }
    let reference = grid.rows.iter().position(|r| r.kind == RowKind::Full);
    for (i, row) in grid.rows.iter().enumerate() {
        let pct = 100.0 * row.test_accuracy;
        let x = left + gap / 2.0 + i as f64 * (bar + gap);
        let y = y_of(pct);
        let is_ref = reference == Some(i);
        let (class, fill) = match row.kind {
            RowKind::Full if is_ref => ("bar full reference", "#d62728"),
            RowKind::Full => ("bar full", "#ff9896"),
            RowKind::Subset => ("bar subset", "#9467bd"),
            RowKind::Single => ("bar single", "#1f77b4"),
        };
        writeln!(
            s,
            r##"<rect class="{class}" x="{x:.1}" y="{y:.1}" width="{bar}" height="{:.1}" fill="{fill}"/>"##,
            top + plot_h - y
        )
        .unwrap();
        writeln!(s, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle">{pct:.2}</text>"##, x + bar / 2.0, y - 4.0).unwrap();
        let (lx, ly) = (x + bar / 2.0, top + plot_h + 10.0);
        writeln!(
            s,
            r##"<text class="xtick" x="{lx:.1}" y="{ly:.1}" text-anchor="end" transform="rotate(-45 {lx:.1} {ly:.1})">{}</text>"##,
            escape(&row.config_name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes both figures into `out_dir` and returns their paths.
pub fn emit_figures(report: &MetricsReport, class_names: &[&str], grid: &AblationGrid, out_dir: &Path) -> Result<[PathBuf; 2]> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let heatmap = out_dir.join(HEATMAP_FILE);
    let comparison = out_dir.join(COMPARISON_FILE);
    std::fs::write(&heatmap, heatmap_svg(report, class_names)).map_err(|e| Error::io(&heatmap, e))?;
    std::fs::write(&comparison, comparison_svg(grid)).map_err(|e| Error::io(&comparison, e))?;
    Ok([heatmap, comparison])
}

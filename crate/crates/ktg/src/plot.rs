//! Deterministic SVG/CSV plots of trial results.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::report::design_label;
use crate::search::{SearchSummary, TrialEvent, TrialRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Mean final ensemble accuracy per node count, one series per design.
pub fn design_curves(records: &[TrialRecord]) -> Vec<Series> {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for t in SearchSummary::from_records(records).trials {
        if let (TrialEvent::Done, Some(a)) = (t.status, t.ens_acc) {
            let e = acc
                .entry(design_label(&t.graph.0))
                .or_default()
                .entry(t.graph.0.num_nodes)
                .or_default();
            e.0 += a;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(label, pts)| Series {
            label,
            points: pts.into_iter().map(|(m, (s, n))| (m as f64, s / n as f64)).collect(),
        })
        .collect()
}

/// `(parameters, accuracy)` of every completed trial, grouped by design.
pub fn param_scatter(records: &[TrialRecord]) -> Vec<Series> {
    let mut out: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for t in SearchSummary::from_records(records).trials {
        if let (TrialEvent::Done, Some(a), Some(p)) = (t.status, t.ens_acc, t.param_count) {
            out.entry(design_label(&t.graph.0)).or_default().push((p as f64, a));
        }
    }
    out.into_iter()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.partial_cmp(b).unwrap());
            Series { label, points }
        })
        .collect()
}

pub fn series_csv(x_name: &str, y_name: &str, series: &[Series]) -> String {
    let mut s = format!("series,{x_name},{y_name}\n");
    for se in series {
        for (x, y) in &se.points {
            let _ = writeln!(s, "\"{}\",{x},{y:.6}", se.label.replace('"', "\"\""));
        }
    }
    s
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A minimal chart: axes with min/max ticks, one color per series, optional
/// connecting lines and a legend.
pub fn chart_svg(title: &str, x_label: &str, y_label: &str, series: &[Series], lines: bool) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 70.0, 180.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.05;
        y1 += 0.05;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{v}</text>"#, sx(v), top + ph + 16.0);
    }
    for v in [y0, y1] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 6.0, sy(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if lines && se.points.len() > 1 {
            let d: Vec<String> = se
                .points
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| format!("{}{:.1} {:.1}", if k == 0 { "M" } else { "L" }, sx(x), sy(y)))
                .collect();
            let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
        }
        for &(x, y) in &se.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(s, r#"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, lx + 14.0, escape(&se.label));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes accuracy-vs-node-count and accuracy-vs-parameters plots (SVG and
/// CSV) into `out_dir` and returns the written paths.
pub fn write_plots(records: &[TrialRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let curves = design_curves(records);
    if curves.is_empty() {
        return Err(Error::Dataset("no completed trials to plot".into()));
    }
    let scatter = param_scatter(records);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = [
        (
            "accuracy_vs_nodes.svg",
            chart_svg("Ensemble accuracy by loss design", "nodes", "ensemble accuracy", &curves, true),
        ),
        ("accuracy_vs_nodes.csv", series_csv("nodes", "ensemble_acc", &curves)),
        (
            "accuracy_vs_params.svg",
            chart_svg("Ensemble accuracy vs parameters", "parameters", "ensemble accuracy", &scatter, false),
        ),
        ("accuracy_vs_params.csv", series_csv("params", "ensemble_acc", &scatter)),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

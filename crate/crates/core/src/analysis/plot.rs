//! Minimal SVG line charts derived from report rows.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::report::{AnalysisReport, Metric, ReportRow};
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn x_of(r: &ReportRow) -> Option<(f64, &'static str)> {
    r.rank
        .map(|v| (v as f64, "rank"))
        .or(r.layer.map(|v| (v as f64, "layer")))
        .or(r.bits.map(|v| (f64::from(v), "bits")))
}

fn series_label(r: &ReportRow, x_axis: &str) -> String {
    let mut parts = Vec::new();
    if let Some(s) = &r.scope {
        parts.push(s.clone());
    }
    if let (Some(b), false) = (r.bits, x_axis == "bits") {
        parts.push(format!("{b}-bit"));
    }
    if let Some(m) = &r.module {
        parts.push(m.clone());
    }
    if let Some(s) = r.seed {
        parts.push(format!("seed {s}"));
    }
    if parts.is_empty() {
        r.experiment_id.clone()
    } else {
        parts.join(" ")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One line per series of `metric` rows; the x axis is rank, layer or bit
/// width, whichever the rows carry first.
pub fn render_svg(report: &AnalysisReport, metric: Metric) -> Result<String> {
    let rows: Vec<&ReportRow> = report.rows_for(metric).collect();
    if rows.is_empty() {
        return Err(Error::Input(format!("no {metric} rows to plot")));
    }
    let axis = rows.iter().find_map(|r| x_of(r)).map_or("index", |(_, a)| a);
    let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        let x = x_of(r).map_or(i as f64, |(x, _)| x);
        series.entry(series_label(r, axis)).or_default().push((x, r.value));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let all = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, metric);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end">{v:.4}</text>"#, MARGIN - 4.0);
    }
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v}</text>"#, H - MARGIN + 14.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{axis}</text>"#, W / 2.0, H - 12.0);
    for (i, (label, pts)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, d.join(" "));
        for &(x, y) in pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#, px(x), py(y));
        }
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly:.1}" fill="{c}">{}</text>"#, W - MARGIN + 4.0 - 120.0, esc(label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

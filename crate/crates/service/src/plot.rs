//! Minimal SVG line charts for benchmark reports.

use std::fmt::Write;

use anyhow::{bail, Context, Result};
use notesearch_eval::latency::LatencyReport;
use notesearch_eval::mcqa::KSweepReport;
use notesearch_eval::REPORT_SCHEMA_VERSION;
use serde_json::Value;

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x_min, x_max) = all().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let y_max = all().fold(0.0f64, |m, p| m.max(p.1));
    let (x_min, x_max) = if x_min.is_finite() && x_max > x_min { (x_min, x_max) } else { (0.0, 1.0) };
    let y_max = if y_max > 0.0 { y_max * 1.1 } else { 1.0 };
    let sx = |x: f64| MARGIN + (x - x_min) / (x_max - x_min) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - y / y_max * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{m} {t} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for i in 0..=4 {
        let y = y_max * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, MARGIN - 6.0, sy(y) + 4.0, y);
    }
    let mut xs: Vec<f64> = all().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in xs {
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, sx(x), H - MARGIN + 16.0, x);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 16.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(y_label),
        y = H / 2.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, path.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, W - MARGIN - 110.0, ly - 9.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, W - MARGIN - 95.0, ly, escape(&s.name));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders a report written by `bench-latency` or `eval-mcqa`.
pub fn plot_report(report: &Value) -> Result<String> {
    let version = report["schema_version"].as_u64().context("report has no schema_version")?;
    if version != REPORT_SCHEMA_VERSION as u64 {
        bail!("unsupported report schema version {version}");
    }
    match report["kind"].as_str() {
        Some("latency") => {
            let r: LatencyReport = serde_json::from_value(report.clone())?;
            let stage = |name: &str, f: fn(&notesearch_eval::latency::LevelStats) -> f64| Series {
                name: name.to_string(),
                points: r.levels.iter().map(|l| (l.level as f64, f(l))).collect(),
            };
            let series = [
                stage("embed", |l| l.embed.median_ms),
                stage("search", |l| l.search.median_ms),
                stage("hydrate", |l| l.hydrate.median_ms),
                stage("total", |l| l.total.median_ms),
            ];
            Ok(line_chart(&format!("Median latency, {} vectors", r.vectors), "concurrent users", "ms", &series))
        }
        Some("mcqa") => {
            let r: KSweepReport = serde_json::from_value(report.clone())?;
            let acc = Series { name: "accuracy".into(), points: r.runs.iter().map(|x| (x.k as f64, x.accuracy)).collect() };
            let lo = Series {
                name: "95% CI low".into(),
                points: r.runs.iter().filter_map(|x| x.wilson_95.map(|w| (x.k as f64, w.0))).collect(),
            };
            Ok(line_chart("MCQA accuracy by retrieval depth", "k (chunks)", "accuracy", &[acc, lo]))
        }
        other => bail!("nothing to plot for report kind {other:?}"),
    }
}

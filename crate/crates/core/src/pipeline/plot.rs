//! Grouped bar chart of benchmark errors as standalone SVG.

use std::fmt::Write as _;
use std::path::Path;

use super::bench::{read_results_csv, BenchmarkResult};
use super::PipelineError;
use crate::io::IoError;

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 140.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 90.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A "nice" upper bound for the axis: 1, 2 or 5 times a power of ten.
fn nice_ceiling(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let p = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * p).find(|&c| c >= v).unwrap_or(10.0 * p)
}

/// One bar group per scenario (in first-appearance order), one bar per
/// method. Failed rows are drawn as a labelled marker instead of a bar.
pub fn render_svg(rows: &[BenchmarkResult]) -> Result<String, PipelineError> {
    if rows.is_empty() {
        return Err(PipelineError::Config("results contain no rows".into()));
    }
    let mut scenarios: Vec<&str> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in rows {
        if !scenarios.contains(&r.scenario.as_str()) {
            scenarios.push(&r.scenario);
        }
        let m = r.method.to_string();
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    let max = rows.iter().map(|r| r.mean_error).filter(|e| e.is_finite()).fold(0.0, f64::max);
    let top = nice_ceiling(max);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let group_w = plot_w / scenarios.len() as f64;
    let bar_w = group_w * 0.8 / methods.len() as f64;
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - v / top);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();

    // Axes, ticks and labels.
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + plot_h;
    writeln!(s, r#"<line class="axis" x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line class="axis" x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, x0 + plot_w).unwrap();
    for k in 0..=5 {
        let v = top * k as f64 / 5.0;
        let y = y_of(v);
        writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/>"#, x0 - 4.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 7.0, y + 4.0, format_tick(v))
            .unwrap();
    }
    writeln!(
        s,
        r#"<text class="axis-label" x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">Mean error (µm)</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text class="axis-label" x="{:.2}" y="{}" text-anchor="middle">Scenario</text>"#,
        x0 + plot_w / 2.0,
        HEIGHT - 15.0
    )
    .unwrap();

    for (gi, scen) in scenarios.iter().enumerate() {
        let gx = x0 + gi as f64 * group_w + group_w * 0.1;
        writeln!(s, r#"<g class="group" data-scenario="{}">"#, escape(scen)).unwrap();
        for (mi, method) in methods.iter().enumerate() {
            let Some(r) = rows.iter().find(|r| r.scenario == *scen && r.method.to_string() == *method) else {
                continue;
            };
            let bx = gx + mi as f64 * bar_w;
            let color = PALETTE[mi % PALETTE.len()];
            if r.mean_error.is_finite() {
                let y = y_of(r.mean_error);
                writeln!(
                    s,
                    r#"<rect class="bar" data-method="{}" x="{bx:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{color}"><title>{} {}: {}</title></rect>"#,
                    escape(method),
                    bar_w * 0.95,
                    (y0 - y).max(0.0),
                    escape(scen),
                    escape(method),
                    r.mean_error
                )
                .unwrap();
            } else {
                writeln!(
                    s,
                    r#"<text class="failed" data-method="{}" x="{:.2}" y="{:.2}" text-anchor="middle" fill="{color}">×</text>"#,
                    escape(method),
                    bx + bar_w / 2.0,
                    y0 - 4.0
                )
                .unwrap();
            }
        }
        writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-35 {:.2} {:.2})">{}</text>"#,
            gx + group_w * 0.4,
            y0 + 16.0,
            gx + group_w * 0.4,
            y0 + 16.0,
            escape(scen)
        )
        .unwrap();
        writeln!(s, "</g>").unwrap();
    }

    for (mi, method) in methods.iter().enumerate() {
        let ly = MARGIN_TOP + 10.0 + 20.0 * mi as f64;
        let lx = WIDTH - MARGIN_RIGHT + 20.0;
        writeln!(s, r#"<rect x="{lx}" y="{ly}" width="12" height="12" fill="{}"/>"#, PALETTE[mi % PALETTE.len()])
            .unwrap();
        writeln!(s, r#"<text class="legend" x="{}" y="{}">{}</text>"#, lx + 18.0, ly + 10.0, escape(method)).unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 1e4 {
        format!("{}", (v * 1e4).round() / 1e4)
    } else {
        format!("{v:.1e}")
    }
}

/// Reads a results CSV and writes the chart to `out_svg`.
pub fn render_results(results_csv: &Path, out_svg: &Path) -> Result<(), PipelineError> {
    let rows = read_results_csv(results_csv)?;
    let svg = render_svg(&rows)?;
    std::fs::write(out_svg, svg).map_err(|source| IoError::Io { path: out_svg.to_path_buf(), source })?;
    Ok(())
}

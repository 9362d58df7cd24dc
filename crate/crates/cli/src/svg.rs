//! Static line charts.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};
use crate::metrics::{MetricsTable, NUMERIC_COLUMNS};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// A named line: the round-wise mean of `metric` over `tables`.
pub struct Series<'a> {
    pub label: String,
    pub tables: Vec<&'a MetricsTable>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn mean_curve(series: &Series, metric: &str) -> CliResult<Vec<(f64, f64)>> {
    let mut sums: Vec<(f64, f64, usize)> = Vec::new();
    for table in &series.tables {
        let values = table.column(metric).ok_or_else(|| unknown(metric))?;
        for (row, v) in table.rows.iter().zip(values) {
            if !v.is_finite() {
                continue;
            }
            match sums.iter_mut().find(|(x, _, _)| *x == row.round as f64) {
                Some(slot) => {
                    slot.1 += v;
                    slot.2 += 1;
                }
                None => sums.push((row.round as f64, v, 1)),
            }
        }
    }
    sums.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(sums.into_iter().map(|(x, s, n)| (x, s / n as f64)).collect())
}

fn unknown(metric: &str) -> CliError {
    CliError::UnknownMetric {
        metric: metric.to_string(),
        valid: NUMERIC_COLUMNS.iter().map(|s| s.to_string()).collect(),
    }
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 0.5 } else { lo.abs() * 0.05 };
        (lo - pad, hi + pad)
    }
}

/// Renders one polyline per series, with axes, tick labels and a legend.
pub fn render_svg(series: &[Series], metric: &str) -> CliResult<String> {
    if !NUMERIC_COLUMNS.contains(&metric) {
        return Err(unknown(metric));
    }
    let curves = series
        .iter()
        .map(|s| mean_curve(s, metric))
        .collect::<CliResult<Vec<_>>>()?;
    let (x0, x1) = bounds(curves.iter().flatten().map(|p| p.0));
    let (y0, y1) = bounds(curves.iter().flatten().map(|p| p.1));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            out,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{xv:.0}</text>"#,
            TOP + ph + 18.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.4}</text>"#,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">round</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(metric)
    );
    for (i, (s, curve)) in series.iter().zip(&curves).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn emit_svg(series: &[Series], metric: &str, path: &Path) -> CliResult<()> {
    let svg = render_svg(series, metric)?;
    std::fs::write(path, svg).map_err(|e| CliError::io(path, e))
}

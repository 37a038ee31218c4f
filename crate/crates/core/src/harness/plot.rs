use super::{HarnessError, Result};
use std::fmt::Write as _;

/// Which CSV layout a plot reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotKind {
    Snr,
    Pilots,
    Transfer,
}

impl PlotKind {
    fn header(&self) -> &'static str {
        match self {
            PlotKind::Snr => "snr_db,method,nmse_db,stderr",
            PlotKind::Pilots => "n_pilot,method,nmse_db,stderr",
            PlotKind::Transfer => "fraction,epochs,nmse_db,stderr",
        }
    }

    fn x_label(&self) -> &'static str {
        match self {
            PlotKind::Snr => "SNR (dB)",
            PlotKind::Pilots => "pilots (log2)",
            PlotKind::Transfer => "fraction of target data",
        }
    }
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn schema(msg: impl Into<String>) -> HarnessError {
    HarnessError::Schema(msg.into())
}

fn number(field: &str, line: usize) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| schema(format!("line {line}: `{field}` is not a number")))
}

/// Series name and point per data row.
fn parse_rows(csv: &str, kind: PlotKind) -> Result<Vec<(String, f64, f64)>> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| schema("empty csv"))?;
    if header.trim() != kind.header() {
        return Err(schema(format!("header `{header}`, expected `{}`", kind.header())));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(schema(format!("line {}: {} fields", i + 2, f.len())));
        }
        let x = number(f[0], i + 2)?;
        let y = number(f[2], i + 2)?;
        let (name, x) = match kind {
            PlotKind::Snr => (f[1].trim().to_string(), x),
            PlotKind::Pilots if x > 0.0 => (f[1].trim().to_string(), x.log2()),
            PlotKind::Pilots => return Err(schema(format!("line {}: pilot count {x}", i + 2))),
            PlotKind::Transfer if x == 0.0 => ("zero-shot".to_string(), x),
            PlotKind::Transfer => (format!("{} epochs", number(f[1], i + 2)?), x),
        };
        rows.push((name, x, y));
    }
    if rows.is_empty() {
        return Err(schema("no data rows"));
    }
    Ok(rows)
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Renders a sweep or transfer CSV as an SVG line chart with a dB y-axis,
/// one polyline per series in order of first appearance.
pub fn emit_plot(csv: &str, kind: PlotKind) -> Result<String> {
    let rows = parse_rows(csv, kind)?;
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (name, x, y) in rows {
        match series.iter_mut().find(|(n, _)| *n == name) {
            Some((_, pts)) => pts.push((x, y)),
            None => series.push((name, vec![(x, y)])),
        }
    }
    let all = || series.iter().flat_map(|(_, p)| p.iter());
    let (x0, x1) = range(all().map(|p| p.0));
    let (y0, y1) = range(all().map(|p| p.1));
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let w = &mut svg;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(w, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xv:.1}</text>"#,
            sx(xv),
            TOP + ph + 16.0
        );
        let _ = writeln!(
            w,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{yv:.1}</text>"#,
            LEFT - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        kind.x_label()
    );
    let _ = writeln!(
        w,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">NMSE (dB)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            w,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            w,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="1.5"/>"#,
            WIDTH - RIGHT + 10.0,
            WIDTH - RIGHT + 30.0
        );
        let _ = writeln!(w, r#"<text x="{:.2}" y="{:.2}">{name}</text>"#, WIDTH - RIGHT + 36.0, ly + 4.0);
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

//! Self-contained SVG line plots of sweep results. Output depends only on the
//! rows, so identical CSV input gives identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::experiment::{Axis, ResultRow};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 460.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 570.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 400.0;
const PALETTE: [&str; 8] = ["#000000", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Wsr,
    ViolationRate,
}

impl Metric {
    fn file_stem(self) -> &'static str {
        match self {
            Metric::Wsr => "wsr",
            Metric::ViolationRate => "violation",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Wsr => "Mean WSR (bps/Hz)",
            Metric::ViolationRate => "Violation rate",
        }
    }

    fn value(self, r: &ResultRow) -> f64 {
        match self {
            Metric::Wsr => r.mean_wsr_bps_hz,
            Metric::ViolationRate => r.violation_rate,
        }
    }
}

/// One polyline: series label and `(x, y)` points sorted by `x`, averaged
/// over training seeds.
pub type Series = (String, Vec<(f64, f64)>);

pub fn series(rows: &[ResultRow], axis: &str, metric: Metric) -> Vec<Series> {
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.axis == axis) {
        let label = r.series();
        if !order.contains(&label) {
            order.push(label.clone());
        }
        let e = acc.entry(label).or_default().entry(ordered_key(r.axis_value)).or_insert((r.axis_value, 0.0, 0));
        e.1 += metric.value(r);
        e.2 += 1;
    }
    // Baseline first, then in order of appearance.
    order.sort_by_key(|l| l != "WMMSE");
    order
        .into_iter()
        .map(|label| {
            let pts = acc[&label].values().map(|(x, s, n)| (*x, s / *n as f64)).collect();
            (label, pts)
        })
        .collect()
}

/// Total order on finite floats as integer keys.
fn ordered_key(x: f64) -> u64 {
    let b = x.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

/// Tick positions covering `[lo, hi]` with a 1/2/5 step.
fn ticks(lo: f64, hi: f64) -> (f64, f64, Vec<f64>) {
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let start = (lo / step).floor() * step;
    let end = (hi / step).ceil() * step;
    let n = ((end - start) / step).round() as usize;
    (start, end, (0..=n).map(|i| start + i as f64 * step).collect())
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    let s = format!("{v:.decimals$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

/// Renders one plot.
pub fn render(title: &str, x_label: &str, y_label: &str, data: &[Series]) -> Result<String> {
    let pts: Vec<(f64, f64)> = data.iter().flat_map(|s| s.1.iter().copied()).collect();
    if pts.is_empty() {
        return Err(Error::InvalidParam(format!("nothing to plot for '{title}'")));
    }
    if let Some(p) = pts.iter().find(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::NonFinite(format!("point {p:?} in '{title}'")));
    }
    let (xmin, xmax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (ymin, ymax) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let (x0, x1, xt) = ticks(xmin, xmax);
    let (y0, y1, yt) = ticks(ymin.min(0.0), ymax);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * (RIGHT - LEFT);
    let sy = |y: f64| BOTTOM - (y - y0) / (y1 - y0) * (BOTTOM - TOP);
    let xstep = xt.get(1).map_or(1.0, |t| t - xt[0]);
    let ystep = yt.get(1).map_or(1.0, |t| t - yt[0]);

    let mut s = String::new();
    let w = &mut s;
    writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(w, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (LEFT + RIGHT) / 2.0, escape(title))
        .unwrap();
    for t in &yt {
        let y = sy(*t);
        writeln!(w, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{RIGHT}" y2="{y:.2}" stroke="#e0e0e0"/>"##).unwrap();
        writeln!(w, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(*t, ystep))
            .unwrap();
    }
    for t in &xt {
        let x = sx(*t);
        writeln!(w, r##"<line x1="{x:.2}" y1="{BOTTOM}" x2="{x:.2}" y2="{:.1}" stroke="#000"/>"##, BOTTOM + 5.0).unwrap();
        writeln!(w, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, BOTTOM + 19.0, fmt_tick(*t, xstep)).unwrap();
    }
    writeln!(w, r##"<polyline points="{LEFT},{TOP} {LEFT},{BOTTOM} {RIGHT},{BOTTOM}" fill="none" stroke="#000"/>"##).unwrap();
    writeln!(
        w,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (LEFT + RIGHT) / 2.0,
        BOTTOM + 40.0,
        escape(x_label)
    )
    .unwrap();
    writeln!(
        w,
        r#"<text x="20" y="{:.1}" text-anchor="middle" transform="rotate(-90 20 {:.1})">{}</text>"#,
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (i, (label, pts)) in data.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if i >= PALETTE.len() { r#" stroke-dasharray="6 3""# } else { "" };
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        writeln!(w, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#, coords.join(" ")).unwrap();
        for (x, y) in pts {
            writeln!(w, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(*x), sy(*y)).unwrap();
        }
        let ly = TOP + 10.0 + i as f64 * 20.0;
        writeln!(
            w,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/>"#,
            RIGHT + 15.0,
            RIGHT + 40.0
        )
        .unwrap();
        writeln!(w, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, RIGHT + 46.0, ly + 4.0, escape(label)).unwrap();
    }
    writeln!(w, "</svg>").unwrap();
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(file name, svg)` for the WSR and violation-rate plots of every axis in
/// the rows.
pub fn render_all(rows: &[ResultRow]) -> Result<Vec<(String, String)>> {
    if rows.is_empty() {
        return Err(Error::InvalidParam("no result rows to plot".into()));
    }
    let mut axes: Vec<&str> = Vec::new();
    for r in rows {
        if !axes.contains(&r.axis.as_str()) {
            axes.push(&r.axis);
        }
    }
    let mut out = Vec::new();
    for axis in axes {
        let x_label = axis.parse::<Axis>().map_or(axis, |a| a.label());
        for metric in [Metric::Wsr, Metric::ViolationRate] {
            let title = format!("{} vs {x_label}", metric.label());
            let svg = render(&title, x_label, metric.label(), &series(rows, axis, metric))?;
            out.push((format!("{}_vs_{axis}.svg", metric.file_stem()), svg));
        }
    }
    Ok(out)
}

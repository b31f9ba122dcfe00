//! Minimal standalone SVG charts.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// One x value of a seed-aggregated series.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub struct Series {
    pub name: String,
    pub points: Vec<BandPoint>,
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::EPSILON);
        LEFT + (x - self.x.0) / span * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::EPSILON);
        HEIGHT - BOTTOM - (y - self.y.0) / span * (HEIGHT - TOP - BOTTOM)
    }
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi > lo {
        let pad = 0.04 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_owned()
}

fn open(out: &mut String, title: &str, frame: &Frame, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
    let (x0, x1) = (frame.px(frame.x.0), frame.px(frame.x.1));
    let (y0, y1) = (frame.py(frame.y.0), frame.py(frame.y.1));
    let _ = writeln!(out, r##"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##, x1 - x0, y0 - y1);
    for t in ticks(frame.x.0, frame.x.1) {
        let x = frame.px(t);
        let _ = writeln!(out, r##"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{:.1}" stroke="#444"/>"##, y0 + 4.0);
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 18.0, fmt_tick(t));
    }
    for t in ticks(frame.y.0, frame.y.1) {
        let y = frame.py(t);
        let _ = writeln!(out, r##"<line x1="{x0:.1}" y1="{y:.1}" x2="{x1:.1}" y2="{y:.1}" stroke="#ddd"/>"##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 6.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 14.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, i: usize, name: &str, color: &str, dashed: bool) {
    let x = WIDTH - RIGHT + 14.0;
    let y = TOP + 14.0 + 20.0 * i as f64;
    let dash = if dashed { r#" stroke-dasharray="6 4""# } else { "" };
    let _ = writeln!(
        out,
        r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
        x + 22.0
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 28.0, y + 4.0, escape(name));
}

/// Mean lines with a shaded min–max band wherever the band has width.
/// `reference` draws a dashed horizontal line.
pub fn learning_curves(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    reference: Option<(&str, f64)>,
) -> String {
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.x));
    let ys = series
        .iter()
        .flat_map(|s| s.points.iter().flat_map(|p| [p.min, p.max]))
        .chain(reference.map(|r| r.1));
    let (xlo, xhi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (ylo, yhi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let frame = Frame {
        x: padded(xlo, xhi),
        y: padded(ylo.min(yhi), yhi),
    };
    let mut out = String::new();
    open(&mut out, title, &frame, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let c = color(i);
        if s.points.iter().any(|p| p.max > p.min) {
            let upper = s.points.iter().map(|p| (p.x, p.max));
            let lower = s.points.iter().rev().map(|p| (p.x, p.min));
            let pts: Vec<String> = upper
                .chain(lower)
                .map(|(x, y)| format!("{:.1},{:.1}", frame.px(x), frame.py(y)))
                .collect();
            let _ = writeln!(out, r#"<polygon points="{}" fill="{c}" fill-opacity="0.18" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", frame.px(p.x), frame.py(p.mean)))
            .collect();
        let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#, pts.join(" "));
        for p in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{c}"/>"#, frame.px(p.x), frame.py(p.mean));
        }
        legend(&mut out, i, &s.name, c, false);
    }
    if let Some((name, y)) = reference {
        let py = frame.py(y);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{py:.1}" x2="{:.1}" y2="{py:.1}" stroke="#555" stroke-width="1.5" stroke-dasharray="6 4"/>"##,
            frame.px(frame.x.0),
            frame.px(frame.x.1)
        );
        legend(&mut out, series.len(), name, "#555", true);
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter plot with a text annotation in the top-left corner.
pub fn scatter(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], note: &str) -> String {
    let frame = Frame {
        x: padded(
            points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min).min(1.0),
            points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max).max(0.0),
        ),
        y: padded(
            points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).min(1.0),
            points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).max(0.0),
        ),
    };
    let mut out = String::new();
    open(&mut out, title, &frame, x_label, y_label);
    for &(x, y) in points {
        let _ = writeln!(
            out,
            r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{}" fill-opacity="0.6"/>"#,
            frame.px(x),
            frame.py(y),
            color(0)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="13">{}</text>"#,
        frame.px(frame.x.0) + 8.0,
        frame.py(frame.y.1) + 18.0,
        escape(note)
    );
    out.push_str("</svg>\n");
    out
}

//! Minimal deterministic SVG plots: lines, histograms and scatter.

use std::fmt::Write;

use hyperlat::stats::Histogram;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plot area mapping `[x0, x1] × [y0, y1]` onto the canvas.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        let widen = |a: f64, b: f64| if a == b { (a - 0.5, b + 0.5) } else { (a, b) };
        let (x0, x1) = widen(x0, x1);
        let (y0, y1) = widen(y0, y1);
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)
    }
}

fn header(out: &mut String, title: &str, timestamp: Option<&str>) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    if let Some(ts) = timestamp {
        let _ = writeln!(out, "<!-- generated {} -->", escape(ts));
    }
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn axes(out: &mut String, f: &Frame, xlabel: &str, ylabel: &str, log_y: bool) {
    let (left, right) = (MARGIN_L, WIDTH - MARGIN_R);
    let (top, bottom) = (MARGIN_T, HEIGHT - MARGIN_B);
    let _ = writeln!(
        out,
        r#"<path d="M{left} {top} V{bottom} H{right}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let x = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let y = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let (px, py) = (f.px(x), f.py(y));
        let ylab = if log_y { tick(10f64.powf(y)) } else { tick(y) };
        let _ = writeln!(
            out,
            r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            bottom + 16.0,
            tick(x)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{ylab}</text>"#,
            left - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        (left + right) / 2.0,
        HEIGHT - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        (top + bottom) / 2.0,
        (top + bottom) / 2.0,
        escape(ylabel)
    );
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN_T + 16.0 * i as f64 + 8.0;
        let x = WIDTH - MARGIN_R + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{}" y="{:.2}">{}</text>"#,
            y - 9.0,
            color(i),
            x + 14.0,
            y,
            escape(name)
        );
    }
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Polyline plot. With `log_y`, nonpositive values are dropped.
pub fn line_plot(
    title: &str,
    xlabel: &str,
    ylabel: &str,
    series: &[Series<'_>],
    log_y: bool,
    timestamp: Option<&str>,
) -> String {
    let transformed: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|p| !log_y || p.1 > 0.0)
                .map(|&(x, y)| (x, if log_y { y.log10() } else { y }))
                .filter(|p| p.0.is_finite() && p.1.is_finite())
                .collect()
        })
        .collect();
    let all = transformed.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let f = Frame::new(x0, x1, y0, y1);
    let mut out = String::new();
    header(&mut out, title, timestamp);
    axes(&mut out, &f, xlabel, ylabel, log_y);
    for (i, pts) in transformed.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let mut d = String::new();
        for (j, &(x, y)) in pts.iter().enumerate() {
            let _ = write!(d, "{}{:.2} {:.2} ", if j == 0 { "M" } else { "L" }, f.px(x), f.py(y));
        }
        let _ = writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            d.trim_end(),
            color(i)
        );
    }
    legend(&mut out, &series.iter().map(|s| s.name).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Overlaid step histograms of probability mass per bin.
pub fn histogram_plot(
    title: &str,
    xlabel: &str,
    series: &[(&str, &Histogram)],
    timestamp: Option<&str>,
) -> String {
    let x0 = series.iter().map(|s| s.1.lo).fold(f64::INFINITY, f64::min);
    let x1 = series.iter().map(|s| s.1.hi).fold(f64::NEG_INFINITY, f64::max);
    let y1 = series
        .iter()
        .flat_map(|s| s.1.masses.iter().copied())
        .fold(0.0, f64::max);
    let f = Frame::new(x0, x1, 0.0, if y1 > 0.0 { y1 } else { 1.0 });
    let mut out = String::new();
    header(&mut out, title, timestamp);
    axes(&mut out, &f, xlabel, "mass", false);
    for (i, (_, h)) in series.iter().enumerate() {
        let w = h.bin_width();
        let mut d = format!("M{:.2} {:.2} ", f.px(h.lo), f.py(0.0));
        for (b, &m) in h.masses.iter().enumerate() {
            let left = h.lo + b as f64 * w;
            let _ = write!(
                d,
                "L{:.2} {:.2} L{:.2} {:.2} ",
                f.px(left),
                f.py(m),
                f.px(left + w),
                f.py(m)
            );
        }
        let _ = write!(d, "L{:.2} {:.2}", f.px(h.hi), f.py(0.0));
        let _ = writeln!(
            out,
            r#"<path d="{d}" fill="{}" fill-opacity="0.25" stroke="{}"/>"#,
            color(i),
            color(i)
        );
    }
    legend(&mut out, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

pub struct ScatterPoint {
    pub x: f64,
    pub y: f64,
    pub group: usize,
    /// Drawn hollow and faded.
    pub hidden: bool,
}

/// Scatter of unit-disc coordinates inside a circular outline.
pub fn sphere_projection(
    title: &str,
    points: &[ScatterPoint],
    group_names: &[String],
    timestamp: Option<&str>,
) -> String {
    let r = ((WIDTH - MARGIN_L - MARGIN_R).min(HEIGHT - MARGIN_T - MARGIN_B) / 2.0) / 1.05;
    let cx = MARGIN_L + (WIDTH - MARGIN_L - MARGIN_R) / 2.0;
    let cy = MARGIN_T + (HEIGHT - MARGIN_T - MARGIN_B) / 2.0;
    let mut out = String::new();
    header(&mut out, title, timestamp);
    let _ = writeln!(
        out,
        r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="none" stroke="#888"/>"##
    );
    // Hidden (back-hemisphere) points first so visible ones stay on top.
    for hidden in [true, false] {
        for p in points.iter().filter(|p| p.hidden == hidden) {
            let c = color(p.group);
            let style = if hidden {
                format!(r#"fill="none" stroke="{c}" stroke-opacity="0.35""#)
            } else {
                format!(r#"fill="{c}" fill-opacity="0.7""#)
            };
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.2" {style}/>"#,
                cx + r * p.x,
                cy - r * p.y
            );
        }
    }
    legend(&mut out, &group_names.iter().map(String::as_str).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

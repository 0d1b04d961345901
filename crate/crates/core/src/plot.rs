//! Standalone SVG line and scatter charts.

use std::fmt::Write as _;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 320.0;
const MARGIN: f64 = 40.0;
const PALETTE: [&str; 6] = ["#222222", "#1f77b4", "#2ca02c", "#d62728", "#9467bd", "#ff7f0e"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

impl<'a> Series<'a> {
    pub fn line(label: &'a str, ys: &[f64]) -> Self {
        Self {
            label,
            points: ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect(),
        }
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(series: &[Series]) -> Self {
        let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
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
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame_svg(title: &str, f: &Frame) -> String {
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{MARGIN}" y="20" font-size="13">{}</text>"#, escape(title)).unwrap();
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(out, r##"<path d="M{l} {t}V{b}H{r}" fill="none" stroke="#888"/>"##).unwrap();
    writeln!(out, r#"<text x="4" y="{:.1}">{:.3}</text>"#, t + 4.0, f.y1).unwrap();
    writeln!(out, r#"<text x="4" y="{:.1}">{:.3}</text>"#, b, f.y0).unwrap();
    writeln!(out, r#"<text x="{l}" y="{:.1}">{}</text>"#, b + 14.0, f.x0).unwrap();
    writeln!(out, r#"<text x="{r}" y="{:.1}" text-anchor="end">{}</text>"#, b + 14.0, f.x1).unwrap();
    out
}

fn legend(out: &mut String, series: &[Series]) {
    for (i, s) in series.iter().enumerate() {
        let x = WIDTH - MARGIN - 110.0;
        let y = MARGIN + 14.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        writeln!(out, r#"<rect x="{x}" y="{:.1}" width="10" height="3" fill="{c}"/>"#, y - 4.0).unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{y:.1}">{}</text>"#, x + 14.0, escape(s.label)).unwrap();
    }
}

pub fn line_chart(title: &str, series: &[Series]) -> String {
    let f = Frame::fit(series);
    let mut out = frame_svg(title, &f);
    for (i, s) in series.iter().enumerate() {
        let mut d = String::new();
        for (j, &(x, y)) in s.points.iter().enumerate() {
            write!(d, "{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, f.px(x), f.py(y)).unwrap();
        }
        let c = PALETTE[i % PALETTE.len()];
        writeln!(out, r#"<path d="{d}" fill="none" stroke="{c}" stroke-width="1.5"/>"#).unwrap();
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

pub fn scatter_chart(title: &str, series: &[Series]) -> String {
    let f = Frame::fit(series);
    let mut out = frame_svg(title, &f);
    for (i, s) in series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        for &(x, y) in &s.points {
            writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}" fill-opacity="0.7"/>"#, f.px(x), f.py(y)).unwrap();
        }
    }
    legend(&mut out, series);
    out.push_str("</svg>\n");
    out
}

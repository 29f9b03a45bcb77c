//! Minimal SVG line charts and heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.1e}")
    } else {
        format!("{:.3}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title));
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let fx = |x: f64| if self.log_x { x.log10() } else { x };
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| y.is_finite() && fx(*x).is_finite());
        let (x0, x1) = range(pts().map(|p| fx(p.0)));
        let (y0, y1) = range(pts().map(|p| p.1));
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let sx = |x: f64| LEFT + (fx(x) - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;
        let mut out = String::new();
        header(&mut out, &self.title);
        let _ = write!(out, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for i in 0..=4 {
            let t = i as f64 / 4.0;
            let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
            let xl = if self.log_x { 10f64.powf(xv) } else { xv };
            let (px, py) = (LEFT + t * pw, TOP + (1.0 - t) * ph);
            let _ = write!(out, r##"<line x1="{px}" y1="{TOP}" x2="{px}" y2="{}" stroke="#ddd"/>"##, TOP + ph);
            let _ = write!(out, r##"<line x1="{LEFT}" y1="{py}" x2="{}" y2="{py}" stroke="#ddd"/>"##, LEFT + pw);
            let _ = write!(out, r#"<text x="{px}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, tick(xl));
            let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 5.0, py + 4.0, tick(yv));
        }
        if y0 < 0.0 && y1 > 0.0 {
            let _ = write!(out, r##"<line x1="{LEFT}" y1="{0}" x2="{1}" y2="{0}" stroke="#888" stroke-dasharray="4 3"/>"##, sy(0.0), LEFT + pw);
        }
        let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 15.0, esc(&self.x_label));
        let _ = write!(
            out,
            r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let mut sorted: Vec<(f64, f64)> = s.points.iter().copied().filter(|(x, y)| y.is_finite() && fx(*x).is_finite()).collect();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = sorted.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            if !path.is_empty() {
                let _ = write!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
            }
            for &(x, y) in &sorted {
                let _ = write!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
            let ly = TOP + 10.0 + 18.0 * i as f64;
            let lx = W - RIGHT + 12.0;
            let _ = write!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
            let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 24.0, ly + 4.0, esc(&s.label));
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Values on a grid of `rows × cols` cells, row 0 drawn at the bottom.
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_ticks: Vec<String>,
    pub y_ticks: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Blue for negative, white for zero, red for positive when the range
/// straddles zero; a white-to-red ramp otherwise.
fn color(v: f64, lo: f64, hi: f64) -> String {
    if !v.is_finite() {
        return "#bbbbbb".into();
    }
    let (r, g, b) = if lo < 0.0 && hi > 0.0 {
        let m = lo.abs().max(hi.abs());
        let t = (v / m).clamp(-1.0, 1.0);
        if t >= 0.0 {
            (1.0, 1.0 - t, 1.0 - t)
        } else {
            (1.0 + t, 1.0 + t, 1.0)
        }
    } else {
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        (1.0, 1.0 - 0.8 * t, 1.0 - 0.9 * t)
    };
    format!("#{:02x}{:02x}{:02x}", (r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8)
}

impl Heatmap {
    pub fn render(&self) -> String {
        let rows = self.values.len();
        let cols = self.values.first().map_or(0, Vec::len);
        let finite = || self.values.iter().flatten().copied().filter(|v| v.is_finite());
        let lo = finite().fold(f64::INFINITY, f64::min);
        let hi = finite().fold(f64::NEG_INFINITY, f64::max);
        let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
        let (cw, ch) = (pw / cols.max(1) as f64, ph / rows.max(1) as f64);
        let mut out = String::new();
        header(&mut out, &self.title);
        for (r, row) in self.values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let (x, y) = (LEFT + c as f64 * cw, TOP + (rows - 1 - r) as f64 * ch);
                let _ = write!(
                    out,
                    r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}</title></rect>"#,
                    cw + 0.5,
                    ch + 0.5,
                    color(v, lo, hi),
                    tick(v)
                );
            }
        }
        let _ = write!(out, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        let every = |n: usize| (n / 8).max(1);
        for (c, t) in self.x_ticks.iter().enumerate().step_by(every(cols)) {
            let _ = write!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, LEFT + (c as f64 + 0.5) * cw, TOP + ph + 16.0, esc(t));
        }
        for (r, t) in self.y_ticks.iter().enumerate().step_by(every(rows)) {
            let y = TOP + (rows - 1 - r) as f64 * ch + ch / 2.0 + 4.0;
            let _ = write!(out, r#"<text x="{}" y="{y:.2}" text-anchor="end">{}</text>"#, LEFT - 5.0, esc(t));
        }
        let _ = write!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 15.0, esc(&self.x_label));
        let _ = write!(
            out,
            r#"<text transform="translate(18 {}) rotate(-90)" text-anchor="middle">{}</text>"#,
            TOP + ph / 2.0,
            esc(&self.y_label)
        );
        let lx = W - RIGHT + 20.0;
        for i in 0..=10 {
            let v = lo + (hi - lo) * i as f64 / 10.0;
            let y = TOP + (10 - i) as f64 * 16.0;
            let _ = write!(out, r#"<rect x="{lx}" y="{y}" width="16" height="16" fill="{}"/>"#, color(v, lo, hi));
            if i % 5 == 0 {
                let _ = write!(out, r#"<text x="{}" y="{}">{}</text>"#, lx + 22.0, y + 12.0, tick(v));
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

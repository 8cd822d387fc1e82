//! Minimal SVG 1.1 plotting: line charts, quantile bands and
//! equirectangular heatmaps. Output depends only on the input numbers.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

pub const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log10,
}

impl Scale {
    fn map(self, v: f64) -> Option<f64> {
        match self {
            Scale::Linear => v.is_finite().then_some(v),
            Scale::Log10 => (v > 0.0 && v.is_finite()).then(|| v.log10()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Series<'a> {
    pub label: &'a str,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub color: &'a str,
    pub dashed: bool,
}

/// Shaded region between `lower` and `upper` at abscissae `x`.
#[derive(Debug, Clone)]
pub struct Band<'a> {
    pub x: &'a [f64],
    pub lower: &'a [f64],
    pub upper: &'a [f64],
    pub color: &'a str,
}

#[derive(Debug, Clone)]
pub struct Chart<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub x_scale: Scale,
    pub y_scale: Scale,
    pub series: Vec<Series<'a>>,
    pub bands: Vec<Band<'a>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, w: f64, h: f64) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect x="0" y="0" width="{w:.0}" height="{h:.0}" fill="white"/>"#);
}

struct Extent {
    lo: f64,
    hi: f64,
}

impl Extent {
    fn of(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Extent { lo: 0.0, hi: 1.0 };
        }
        if hi - lo <= 1e-300 {
            let pad = lo.abs().max(1.0) * 0.5;
            return Extent { lo: lo - pad, hi: hi + pad };
        }
        Extent { lo, hi }
    }

    fn frac(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

fn tick_label(v: f64, scale: Scale) -> String {
    match scale {
        Scale::Linear => format!("{v:.3e}"),
        Scale::Log10 => format!("1e{v:.1}"),
    }
}

impl Chart<'_> {
    pub fn render(&self) -> String {
        let mut out = String::new();
        header(&mut out, WIDTH, HEIGHT);
        let xs = self
            .series
            .iter()
            .flat_map(|s| s.x.iter())
            .chain(self.bands.iter().flat_map(|b| b.x.iter()))
            .filter_map(|&v| self.x_scale.map(v));
        let ex = Extent::of(xs);
        let ys = self
            .series
            .iter()
            .flat_map(|s| s.y.iter())
            .chain(self.bands.iter().flat_map(|b| b.lower.iter().chain(b.upper.iter())))
            .filter_map(|&v| self.y_scale.map(v));
        let ey = Extent::of(ys);
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let px = |v: f64| MARGIN_L + ex.frac(v) * pw;
        let py = |v: f64| MARGIN_T + (1.0 - ey.frac(v)) * ph;

        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            WIDTH / 2.0,
            escape(self.title)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{MARGIN_L:.1}" y="{MARGIN_T:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#
        );
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = ex.lo + f * (ex.hi - ex.lo);
            let yv = ey.lo + f * (ey.hi - ey.lo);
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(xv),
                HEIGHT - MARGIN_B + 16.0,
                tick_label(xv, self.x_scale)
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN_L - 4.0,
                py(yv) + 4.0,
                tick_label(yv, self.y_scale)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            MARGIN_L + pw / 2.0,
            HEIGHT - 10.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            out,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
            MARGIN_T + ph / 2.0,
            MARGIN_T + ph / 2.0,
            escape(self.y_label)
        );

        for b in &self.bands {
            let mut pts = Vec::new();
            for (x, y) in b.x.iter().zip(b.upper) {
                if let (Some(x), Some(y)) = (self.x_scale.map(*x), self.y_scale.map(*y)) {
                    pts.push(format!("{:.2},{:.2}", px(x), py(y)));
                }
            }
            for (x, y) in b.x.iter().zip(b.lower).rev() {
                if let (Some(x), Some(y)) = (self.x_scale.map(*x), self.y_scale.map(*y)) {
                    pts.push(format!("{:.2},{:.2}", px(x), py(y)));
                }
            }
            let _ = writeln!(
                out,
                r#"<polygon points="{}" fill="{}" fill-opacity="0.2" stroke="none"/>"#,
                pts.join(" "),
                b.color
            );
        }
        for (k, s) in self.series.iter().enumerate() {
            let pts: Vec<String> = s
                .x
                .iter()
                .zip(s.y)
                .filter_map(|(x, y)| Some((self.x_scale.map(*x)?, self.y_scale.map(*y)?)))
                .map(|(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let dash = if s.dashed { r#" stroke-dasharray="6 3""# } else { "" };
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
                pts.join(" "),
                s.color
            );
            let ly = MARGIN_T + 14.0 + 16.0 * k as f64;
            let lx = WIDTH - MARGIN_R - 150.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{}" stroke-width="2"{dash}/>"#,
                lx + 20.0,
                s.color
            );
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 26.0, ly + 4.0, escape(s.label));
        }
        out.push_str("</svg>\n");
        out
    }
}

fn color_ramp(f: f64) -> String {
    // blue, white, red
    let f = if f.is_finite() { f.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if f < 0.5 {
        let t = f / 0.5;
        (t, t, 1.0)
    } else {
        let t = (1.0 - f) / 0.5;
        (1.0, t, t)
    };
    format!("#{:02x}{:02x}{:02x}", (r * 255.0).round() as u8, (g * 255.0).round() as u8, (b * 255.0).round() as u8)
}

/// Equirectangular heatmap of a `n_lat × n_lon` field (north at the top)
/// on a symmetric color scale `[-limit, limit]`.
pub fn heatmap(title: &str, values: &[f64], n_lat: usize, n_lon: usize, limit: f64) -> String {
    let cell = (720.0 / n_lon as f64).clamp(1.0, 12.0);
    let w = cell * n_lon as f64;
    let h = cell * n_lat as f64;
    let mut out = String::new();
    header(&mut out, w + 20.0, h + 50.0);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        (w + 20.0) / 2.0,
        escape(title)
    );
    let limit = if limit > 0.0 && limit.is_finite() { limit } else { 1.0 };
    for r in 0..n_lat {
        for c in 0..n_lon {
            let v = values[r * n_lon + c];
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"/>"#,
                10.0 + c as f64 * cell,
                30.0 + r as f64 * cell,
                color_ramp(0.5 + 0.5 * v / limit)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="10" y="{:.1}">color range ±{}</text>"#,
        h + 45.0,
        tick_label(limit, Scale::Linear)
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_deterministic_and_skips_unplottable_points() {
        let x = [1.0, 2.0, 3.0];
        let y = [0.0, 1.0, 10.0];
        let chart = Chart {
            title: "a < b",
            x_label: "x",
            y_label: "y",
            x_scale: Scale::Linear,
            y_scale: Scale::Log10,
            series: vec![Series {
                label: "s",
                x: &x,
                y: &y,
                color: PALETTE[0],
                dashed: false,
            }],
            bands: vec![],
        };
        let a = chart.render();
        assert_eq!(a, chart.render());
        assert!(a.contains("a &lt; b"));
        let line = a.lines().find(|l| l.starts_with("<polyline")).unwrap();
        assert_eq!(line.matches(',').count(), 2);
    }

    #[test]
    fn heatmap_has_one_cell_per_value() {
        let s = heatmap("f", &[-1.0, 0.0, 1.0, 2.0], 2, 2, 1.0);
        assert_eq!(s.matches("<rect").count(), 5);
        assert!(s.contains("#0000ff") && s.contains("#ffffff") && s.contains("#ff0000"));
    }
}

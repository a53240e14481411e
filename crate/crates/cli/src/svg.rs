//! Static SVG charts: lines, points with error bars, axes with a few ticks.

use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Clone, Debug, Default)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Symmetric vertical error per point; empty for none.
    pub errors: Vec<f64>,
    /// Draw markers instead of a polyline.
    pub scatter: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Dashed `y = x` reference line.
    pub diagonal: bool,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(chart: &Chart) -> ((f64, f64), (f64, f64)) {
    let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
    let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &chart.series {
        for (i, &(x, y)) in s.points.iter().enumerate() {
            if !(x.is_finite() && y.is_finite()) {
                continue;
            }
            let e = s.errors.get(i).copied().unwrap_or(0.0);
            xs = (xs.0.min(x), xs.1.max(x));
            ys = (ys.0.min(y - e), ys.1.max(y + e));
        }
    }
    if chart.diagonal {
        let lo = xs.0.min(ys.0);
        let hi = xs.1.max(ys.1);
        xs = (lo, hi);
        ys = (lo, hi);
    }
    let pad = |(lo, hi): (f64, f64)| {
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        let span = (hi - lo).max(1e-9);
        (lo - 0.05 * span, hi + 0.05 * span)
    };
    (pad(xs), pad(ys))
}

pub fn render(chart: &Chart) -> String {
    let ((x0, x1), (y0, y1)) = bounds(chart);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 1.5 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 1.5 * MARGIN);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(&chart.title));
    let (bx, by) = (px(x0), py(y0));
    let _ = writeln!(s, r#"<path d="M{bx:.1},{:.1} L{bx:.1},{by:.1} L{:.1},{by:.1}" stroke="black" fill="none"/>"#, py(y1), px(x1));
    for k in 0..=4 {
        let xv = x0 + (x1 - x0) * k as f64 / 4.0;
        let yv = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, px(xv), by + 14.0, fmt(xv));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, bx - 4.0, py(yv) + 4.0, fmt(yv));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (bx + px(x1)) / 2.0, H - 12.0, escape(&chart.x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        (by + py(y1)) / 2.0,
        (by + py(y1)) / 2.0,
        escape(&chart.y_label)
    );
    if chart.diagonal {
        let lo = x0.max(y0);
        let hi = x1.min(y1);
        let _ = writeln!(s, r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#888" stroke-dasharray="4 3"/>"##, px(lo), py(lo), px(hi), py(hi));
    }
    for (i, ser) in chart.series.iter().enumerate() {
        let c = PALETTE[i % PALETTE.len()];
        if ser.scatter {
            for (j, &(x, y)) in ser.points.iter().enumerate() {
                if let Some(&e) = ser.errors.get(j) {
                    let _ = writeln!(s, r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{c}"/>"#, px(x), py(y - e), py(y + e));
                }
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, px(x), py(y));
            }
        } else {
            let d: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" stroke="{c}" fill="none" stroke-width="1.5"/>"#, d.join(" "));
        }
        let ly = 34.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{c}"/>"#, W - 150.0, ly - 9.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{ly:.1}">{}</text>"#, W - 136.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

//! Minimal SVG line plots. Figures are polylines with axes, ticks and a
//! legend; anything fancier belongs in an external tool fed by the CSVs
//! written alongside every plot.

use std::fmt::Write as _;

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlotConfig {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: usize,
    pub height: usize,
}

impl Default for PlotConfig {
    fn default() -> Self {
        PlotConfig {
            title: String::new(),
            x_label: "x".into(),
            y_label: "y".into(),
            width: 640,
            height: 420,
        }
    }
}

const MARGIN_LEFT: f64 = 62.0;
const MARGIN_RIGHT: f64 = 18.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f6fb2", "#c5442e", "#2e8540", "#8656b8", "#b08900", "#50a8a0"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let s = if a >= 1000.0 || a < 0.001 {
        format!("{v:.2e}")
    } else if a >= 10.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    };
    if s.contains('.') && !s.contains('e') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// (min, max) over finite coordinates, padded so a flat or empty range
/// still spans something drawable.
fn axis_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

/// Renders series as an SVG document. Non-finite points are skipped; a
/// plot with no drawable points still renders its axes.
pub fn line_plot(cfg: &PlotConfig, series: &[Series]) -> String {
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let (x0, x1) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = axis_range(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = w - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = h - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * plot_h;

    let mut out = String::new();
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = write!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n");
    if !cfg.title.is_empty() {
        let _ = write!(
            out,
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            w / 2.0,
            xml_escape(&cfg.title)
        );
    }

    // Axes.
    let _ = write!(
        out,
        "<path d=\"M {l} {t} L {l} {b} L {r} {b}\" stroke=\"black\" fill=\"none\"/>\n",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = h - MARGIN_BOTTOM,
        r = w - MARGIN_RIGHT,
    );
    let ticks = 5usize;
    for i in 0..=ticks {
        let f = i as f64 / ticks as f64;
        let xv = x0 + f * (x1 - x0);
        let xp = sx(xv);
        let yb = h - MARGIN_BOTTOM;
        let _ = write!(
            out,
            "<line x1=\"{xp:.1}\" y1=\"{yb}\" x2=\"{xp:.1}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{xp:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            yb + 5.0,
            yb + 19.0,
            fmt_tick(xv)
        );
        let yv = y0 + f * (y1 - y0);
        let yp = sy(yv);
        let _ = write!(
            out,
            "<line x1=\"{}\" y1=\"{yp:.1}\" x2=\"{MARGIN_LEFT}\" y2=\"{yp:.1}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            yp + 4.0,
            fmt_tick(yv)
        );
    }
    let _ = write!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        h - 10.0,
        xml_escape(&cfg.x_label)
    );
    let _ = write!(
        out,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n",
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        xml_escape(&cfg.y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1)))
            .collect();
        if !pts.is_empty() {
            let _ = write!(
                out,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                pts.join(" ")
            );
        }
        // Legend entry, stacked top-right inside the plot area.
        let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
        let lx = w - MARGIN_RIGHT - 130.0;
        let _ = write!(
            out,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
             <text x=\"{}\" y=\"{}\">{}</text>\n",
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            xml_escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

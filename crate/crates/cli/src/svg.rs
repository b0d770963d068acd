//! Hand-rolled SVG charts: polylines, markers and bars on linear axes.
//!
//! Coordinates are printed with fixed precision so equal inputs give equal
//! bytes.

use std::fmt::Write;

const PANEL_W: f64 = 380.0;
const PANEL_H: f64 = 260.0;
const MARGIN_L: f64 = 58.0;
const MARGIN_R: f64 = 14.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 42.0;
const HEADER_H: f64 = 34.0;

pub const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mark {
    Line,
    Dots,
    Squares,
    /// Bars centred at `x + offset`, both in data units.
    Bars {
        width: f64,
        offset: f64,
    },
}

#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub color: &'static str,
    pub mark: Mark,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let n = if f <= 1.0 {
        1.0
    } else if f <= 2.0 {
        2.0
    } else if f <= 5.0 {
        5.0
    } else {
        10.0
    };
    n * mag
}

fn ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let step = nice_step(hi - lo);
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor()) as usize
    };
    let mut out = Vec::new();
    let mut i = (lo / step).ceil() as i64;
    loop {
        let t = i as f64 * step;
        if t > hi + step * 1e-9 {
            break;
        }
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        i += 1;
    }
    (out, decimals)
}

impl Panel {
    fn ranges(&self) -> ((f64, f64), (f64, f64)) {
        let mut x = (f64::INFINITY, f64::NEG_INFINITY);
        let mut y_hi: f64 = 0.0;
        for s in &self.series {
            let (pad, off) = match s.mark {
                Mark::Bars { width, offset } => (width / 2.0, offset),
                _ => (0.0, 0.0),
            };
            for &(px, py) in &s.points {
                x.0 = x.0.min(px + off - pad);
                x.1 = x.1.max(px + off + pad);
                y_hi = y_hi.max(py);
            }
        }
        if !x.0.is_finite() {
            x = (0.0, 1.0);
        }
        if x.1 <= x.0 {
            x = (x.0 - 0.5, x.0 + 0.5);
        }
        let y_hi = if y_hi > 0.0 { y_hi * 1.05 } else { 1.0 };
        (x, (0.0, y_hi))
    }

    fn render(&self, out: &mut String, ox: f64, oy: f64) {
        let ((x0, x1), (y0, y1)) = self.ranges();
        let (left, top) = (ox + MARGIN_L, oy + MARGIN_T);
        let (w, h) = (PANEL_W - MARGIN_L - MARGIN_R, PANEL_H - MARGIN_T - MARGIN_B);
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * w;
        let sy = |y: f64| top + h - (y - y0) / (y1 - y0) * h;

        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="13">{}</text>"##,
            left + w / 2.0,
            oy + 18.0,
            escape(&self.title)
        );
        let _ = writeln!(
            out,
            r##"<rect x="{left:.2}" y="{top:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="#333"/>"##
        );

        let (xt, xd) = ticks(x0, x1);
        for t in xt {
            let px = sx(t);
            let _ = writeln!(
                out,
                r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#333"/><text x="{px:.2}" y="{:.2}" text-anchor="middle" font-size="10">{t:.xd$}</text>"##,
                top + h,
                top + h + 4.0,
                top + h + 15.0
            );
        }
        let (yt, yd) = ticks(y0, y1);
        for t in yt {
            let py = sy(t);
            let _ = writeln!(
                out,
                r##"<line x1="{:.2}" y1="{py:.2}" x2="{left:.2}" y2="{py:.2}" stroke="#333"/><line x1="{left:.2}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#eee"/><text x="{:.2}" y="{:.2}" text-anchor="end" font-size="10">{t:.yd$}</text>"##,
                left - 4.0,
                left + w,
                left - 6.0,
                py + 3.5
            );
        }
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">{}</text>"##,
            left + w / 2.0,
            top + h + 32.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            out,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.2} {:.2})">{}</text>"##,
            ox + 14.0,
            top + h / 2.0,
            ox + 14.0,
            top + h / 2.0,
            escape(&self.y_label)
        );

        for s in &self.series {
            match s.mark {
                Mark::Line => {
                    let pts: Vec<String> = s
                        .points
                        .iter()
                        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                        .collect();
                    let _ = writeln!(
                        out,
                        r##"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"##,
                        pts.join(" "),
                        s.color
                    );
                }
                Mark::Dots => {
                    for &(x, y) in &s.points {
                        let _ = writeln!(
                            out,
                            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}"/>"##,
                            sx(x),
                            sy(y),
                            s.color
                        );
                    }
                }
                Mark::Squares => {
                    for &(x, y) in &s.points {
                        let _ = writeln!(
                            out,
                            r##"<rect x="{:.2}" y="{:.2}" width="5" height="5" fill="none" stroke="{}"/>"##,
                            sx(x) - 2.5,
                            sy(y) - 2.5,
                            s.color
                        );
                    }
                }
                Mark::Bars { width, offset } => {
                    for &(x, y) in &s.points {
                        let a = sx(x + offset - width / 2.0);
                        let b = sx(x + offset + width / 2.0);
                        let top_y = sy(y.max(0.0));
                        let _ = writeln!(
                            out,
                            r##"<rect x="{a:.2}" y="{top_y:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"##,
                            b - a,
                            sy(0.0) - top_y,
                            s.color
                        );
                    }
                }
            }
        }

        // Legend, top right inside the frame.
        let named: Vec<&Series> = self.series.iter().filter(|s| !s.name.is_empty()).collect();
        if !named.is_empty() {
            let _ = writeln!(
                out,
                r##"<rect x="{:.2}" y="{:.2}" width="106" height="{:.2}" fill="white" fill-opacity="0.8"/>"##,
                left + w - 114.0,
                top + 2.0,
                12.0 * named.len() as f64 + 4.0
            );
        }
        for (i, s) in named.iter().enumerate() {
            let ly = top + 12.0 + 12.0 * i as f64;
            let lx = left + w - 110.0;
            let _ = writeln!(
                out,
                r##"<rect x="{lx:.2}" y="{:.2}" width="8" height="8" fill="{}"/><text x="{:.2}" y="{ly:.2}" font-size="9">{}</text>"##,
                ly - 7.5,
                s.color,
                lx + 12.0,
                escape(&s.name)
            );
        }
    }
}

/// Lays the panels out in a grid with `columns` per row.
pub fn render(title: &str, digest: &str, panels: &[Panel], columns: usize) -> String {
    let columns = columns.max(1).min(panels.len().max(1));
    let rows = panels.len().div_ceil(columns).max(1);
    let width = columns as f64 * PANEL_W;
    let height = HEADER_H + rows as f64 * PANEL_H;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"##
    );
    let _ = writeln!(out, "<desc>config_digest {}</desc>", escape(digest));
    let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="white"/>"##);
    let _ = writeln!(
        out,
        r##"<text x="{:.2}" y="22" text-anchor="middle" font-size="15" font-weight="bold">{}</text>"##,
        width / 2.0,
        escape(title)
    );
    for (i, p) in panels.iter().enumerate() {
        let ox = (i % columns) as f64 * PANEL_W;
        let oy = HEADER_H + (i / columns) as f64 * PANEL_H;
        p.render(&mut out, ox, oy);
    }
    out.push_str("</svg>\n");
    out
}

//! Minimal SVG line charts and scatter plots.

use std::fmt::Write;

use crate::tensor::Tensor;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let mut f = Frame { x0: f64::INFINITY, x1: f64::NEG_INFINITY, y0: f64::INFINITY, y1: f64::NEG_INFINITY };
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            f = Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        if f.x1 - f.x0 < 1e-12 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 - f.y0 < 1e-12 {
            f.y1 = f.y0 + 1.0;
        }
        f
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        H - PAD - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * PAD)
    }
}

fn open(title: &str, f: &Frame) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>
<rect x="{PAD}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#444"/>
<text x="{PAD}" y="{}" >{:.4}</text><text x="{}" y="{}" text-anchor="end">{:.4}</text>
<text x="4" y="{}">{:.4}</text><text x="4" y="{}">{:.4}</text>
"##,
        W / 2.0,
        escape(title),
        W - 2.0 * PAD,
        H - 2.0 * PAD,
        H - PAD + 16.0,
        f.x0,
        W - PAD,
        H - PAD + 16.0,
        f.x1,
        H - PAD,
        f.y0,
        PAD + 4.0,
        f.y1
    );
    s
}

fn legend(s: &mut String, labels: &[&str]) {
    for (i, l) in labels.iter().enumerate() {
        let y = PAD + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 120.0,
            y - 9.0,
            COLORS[i % COLORS.len()],
            W - PAD - 105.0,
            y,
            escape(l)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One polyline per series.
pub fn line_chart(title: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter().copied()));
    let mut s = open(title, &f);
    for (i, (_, pts)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#,
            COLORS[i % COLORS.len()],
            path.join(" ")
        );
    }
    legend(&mut s, &series.iter().map(|(l, _)| *l).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// First two columns of each set as dots; 1D sets are drawn against row index.
pub fn scatter(title: &str, sets: &[(&str, &Tensor)]) -> String {
    let coords = |t: &Tensor| -> Vec<(f64, f64)> {
        (0..t.rows())
            .map(|r| {
                let row = t.row(r);
                if row.len() >= 2 {
                    (row[0], row[1])
                } else {
                    (row[0], r as f64 / t.rows().max(1) as f64)
                }
            })
            .collect()
    };
    let all: Vec<Vec<(f64, f64)>> = sets.iter().map(|(_, t)| coords(t)).collect();
    let f = Frame::fit(all.iter().flatten().copied());
    let mut s = open(title, &f);
    for (i, pts) in all.iter().enumerate() {
        let _ = write!(s, r#"<g fill="{}" fill-opacity="0.45">"#, COLORS[i % COLORS.len()]);
        for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = write!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, f.px(x), f.py(y));
        }
        s.push_str("</g>\n");
    }
    legend(&mut s, &sets.iter().map(|(l, _)| *l).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let svg = line_chart("loss <a&b>", &[("x", vec![(0.0, 1.0), (1.0, 0.5), (2.0, f64::NAN)])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("&lt;a&amp;b&gt;"));
        let t = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, -1.0]).unwrap();
        let svg = scatter("s", &[("a", &t)]);
        assert_eq!(svg.matches("<circle").count(), 3);
        // degenerate input still yields a frame
        assert!(line_chart("e", &[]).contains("</svg>"));
    }
}

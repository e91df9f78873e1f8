//! Minimal static SVG figures: line plots, 1D density waterfalls and 2D heatmaps.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy)]
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Axis { lo, hi, log }
    }

    fn unit(&self, v: f64) -> Option<f64> {
        let v = if self.log {
            if v > 0.0 { v.log10() } else { return None }
        } else {
            v
        };
        v.is_finite().then(|| (v - self.lo) / (self.hi - self.lo))
    }

    fn tick_label(&self, u: f64) -> String {
        let v = self.lo + u * (self.hi - self.lo);
        if self.log { format!("1e{v:.1}") } else { format!("{v:.3}") }
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(out: &mut String, x: Axis, y: Axis, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (PAD, W - PAD / 2.0, H - PAD, PAD);
    let _ = writeln!(out, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    for i in 0..=4 {
        let u = i as f64 / 4.0;
        let px = x0 + u * (x1 - x0);
        let py = y0 - u * (y0 - y1);
        let _ = writeln!(out, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 16.0, x.tick_label(u));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, py + 4.0, y.tick_label(u));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, H - 16.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn to_px(x: Axis, y: Axis, p: (f64, f64)) -> Option<(f64, f64)> {
    let (ux, uy) = (x.unit(p.0)?, y.unit(p.1)?);
    Some((PAD + ux * (W - 1.5 * PAD), H - PAD - uy * (H - 2.0 * PAD)))
}

/// Polyline plot with markers and a legend.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], log_x: bool, log_y: bool) -> String {
    let x = Axis::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), log_x);
    let y = Axis::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), log_y);
    let mut out = String::new();
    header(&mut out, title);
    frame(&mut out, x, y, xlabel, ylabel);
    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64)> = s.points.iter().filter_map(|&p| to_px(x, y, p)).collect();
        let path: Vec<String> = pts.iter().map(|(a, b)| format!("{a:.2},{b:.2}")).collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        for (a, b) in &pts {
            let _ = writeln!(out, r#"<circle cx="{a:.2}" cy="{b:.2}" r="3" fill="{color}"/>"#);
        }
        let ly = PAD + 8.0 + 16.0 * k as f64;
        let _ = writeln!(out, r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, W - 200.0, ly);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - 185.0, ly + 9.0, escape(&s.label));
    }
    out.push_str("</svg>\n");
    out
}

/// Density profiles `slices[k]` at positions `x`, stacked with a vertical offset per level.
pub fn waterfall(title: &str, x: &[f64], slices: &[Vec<f64>], times: &[f64]) -> String {
    let peak = slices.iter().flatten().cloned().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-300);
    let levels = slices.len().max(1) as f64;
    let offset = 1.0 / levels;
    let xa = Axis::fit(x.iter().cloned(), false);
    let ya = Axis { lo: 0.0, hi: 1.0 + 2.0 * offset, log: false };
    let mut out = String::new();
    header(&mut out, title);
    frame(&mut out, xa, ya, "x", "t (offset) / density");
    for (k, s) in slices.iter().enumerate() {
        let base = k as f64 * offset;
        let pts: Vec<String> = x
            .iter()
            .zip(s)
            .filter_map(|(&xi, &v)| to_px(xa, ya, (xi, base + 2.0 * offset * (v / peak).min(1.0))))
            .map(|(a, b)| format!("{a:.2},{b:.2}"))
            .collect();
        let color = COLORS[k % COLORS.len()];
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#, pts.join(" "));
        if let (Some(t), Some((_, py))) = (times.get(k), to_px(xa, ya, (xa.lo, base))) {
            let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10">t={t:.3}</text>"#, W - PAD / 2.0 + 2.0, py);
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Grid of `nx x ny` rectangles (row-major, last axis fastest), grey scale from 0 to the maximum.
pub fn heatmap(title: &str, values: &[f64], nx: usize, ny: usize) -> String {
    let peak = values.iter().cloned().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-300);
    let side = (H - 2.0 * PAD).min(W - 2.0 * PAD);
    let (cw, ch) = (side / nx as f64, side / ny as f64);
    let mut out = String::new();
    header(&mut out, title);
    for i in 0..nx {
        for j in 0..ny {
            let v = values[i * ny + j];
            let shade = if v.is_finite() { (255.0 * (1.0 - (v / peak).clamp(0.0, 1.0))).round() as u8 } else { 255 };
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({shade},{shade},{shade})"/>"#,
                PAD + i as f64 * cw,
                H - PAD - (j + 1) as f64 * ch,
                cw + 0.05,
                ch + 0.05
            );
        }
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">max {peak:.4}</text>"#, PAD + side + 10.0, PAD + 10.0);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_well_formed_and_deterministic() {
        let s = vec![Series { label: "err".into(), points: vec![(0.2, 0.1), (0.1, 0.03), (0.05, 0.009)] }];
        let a = line_plot("trend", "eps", "error", &s, true, true);
        assert_eq!(a, line_plot("trend", "eps", "error", &s, true, true));
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert_eq!(a.matches("<circle").count(), 3);
        let w = waterfall("rho", &[0.0, 0.5], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.0, 1.0]);
        assert_eq!(w.matches("<polyline").count(), 2);
        let h = heatmap("cell", &[0.0, 1.0, 2.0, f64::INFINITY], 2, 2);
        assert_eq!(h.matches("<rect").count(), 5);
        assert!(line_plot("<&>", "", "", &[], false, false).contains("&lt;&amp;&gt;"));
    }
}

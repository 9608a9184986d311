//! Minimal bar/dot charts and heatmaps, emitted as SVG (with labels) and as
//! PNG (shapes only).

use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::dataio::write_atomic;
use crate::error::Result;

const W: u32 = 480;
const H: u32 = 320;
const MARGIN: f64 = 48.0;
const BAR: Rgb<u8> = Rgb([70, 110, 170]);
const DOT: Rgb<u8> = Rgb([200, 80, 40]);
const AXIS: Rgb<u8> = Rgb([40, 40, 40]);

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn hex(c: Rgb<u8>) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Bars and dots share one y axis; one category per x position.
#[derive(Debug, Clone, PartialEq)]
pub struct BarDotChart {
    pub title: String,
    pub y_label: String,
    pub categories: Vec<String>,
    pub bars: Vec<Option<f64>>,
    pub dots: Vec<Option<f64>>,
    pub bar_label: String,
    pub dot_label: String,
}

impl BarDotChart {
    /// y range padded around all finite values.
    fn y_range(&self) -> (f64, f64) {
        let vals: Vec<f64> = self.bars.iter().chain(&self.dots).flatten().copied().collect();
        if vals.is_empty() {
            return (0.0, 1.0);
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.15).max(hi.abs() * 0.02).max(1e-3);
        let base = if lo > 0.0 && lo - pad * 4.0 <= 0.0 { 0.0 } else { lo - pad * 4.0 };
        (base, hi + pad)
    }

    fn layout(&self) -> (f64, impl Fn(f64) -> f64, impl Fn(usize) -> f64) {
        let (lo, hi) = self.y_range();
        let plot_h = H as f64 - 2.0 * MARGIN;
        let y = move |v: f64| H as f64 - MARGIN - (v - lo) / (hi - lo) * plot_h;
        let n = self.categories.len().max(1) as f64;
        let slot = (W as f64 - 2.0 * MARGIN) / n;
        let x = move |i: usize| MARGIN + slot * (i as f64 + 0.5);
        (slot, y, x)
    }

    pub fn to_svg(&self) -> String {
        let (slot, y, x) = self.layout();
        let (lo, hi) = self.y_range();
        let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
        s.push('\n');
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2, escape(&self.title));
        let (x0, y0) = (MARGIN, H as f64 - MARGIN);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="{}"/>"#, W as f64 - MARGIN, hex(AXIS));
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{MARGIN}" x2="{x0}" y2="{y0}" stroke="{}"/>"#, hex(AXIS));
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, x0 - 4.0, y(v) + 4.0);
        }
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">{}</text>"#,
            H / 2,
            H / 2,
            escape(&self.y_label)
        );
        for (i, cat) in self.categories.iter().enumerate() {
            if let Some(b) = self.bars.get(i).copied().flatten() {
                let top = y(b);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                    x(i) - slot * 0.3,
                    slot * 0.6,
                    (y0 - top).max(0.0),
                    hex(BAR)
                );
            }
            if let Some(d) = self.dots.get(i).copied().flatten() {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="5" fill="{}"/>"#, x(i), y(d), hex(DOT));
            }
            let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, x(i), y0 + 16.0, escape(cat));
        }
        let lx = W as f64 - MARGIN - 150.0;
        let _ = writeln!(s, r#"<rect x="{lx}" y="30" width="10" height="10" fill="{}"/>"#, hex(BAR));
        let _ = writeln!(s, r#"<text x="{}" y="39">{}</text>"#, lx + 14.0, escape(&self.bar_label));
        let _ = writeln!(s, r#"<circle cx="{}" cy="50" r="5" fill="{}"/>"#, lx + 5.0, hex(DOT));
        let _ = writeln!(s, r#"<text x="{}" y="54">{}</text>"#, lx + 14.0, escape(&self.dot_label));
        s.push_str("</svg>\n");
        s
    }

    pub fn to_png(&self) -> RgbImage {
        let (slot, y, x) = self.layout();
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        let y0 = H as f64 - MARGIN;
        fill_rect(&mut img, MARGIN, y0, W as f64 - MARGIN, y0 + 1.0, AXIS);
        fill_rect(&mut img, MARGIN - 1.0, MARGIN, MARGIN, y0, AXIS);
        for i in 0..self.categories.len() {
            if let Some(b) = self.bars.get(i).copied().flatten() {
                fill_rect(&mut img, x(i) - slot * 0.3, y(b), x(i) + slot * 0.3, y0, BAR);
            }
            if let Some(d) = self.dots.get(i).copied().flatten() {
                fill_circle(&mut img, x(i), y(d), 5.0, DOT);
            }
        }
        img
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        write_atomic(&stem.with_extension("svg"), self.to_svg().as_bytes())?;
        save_png(&self.to_png(), &stem.with_extension("png"))
    }
}

/// Grid of values, `values[row][col]`, coloured from low (dark) to high
/// (light).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub row_title: String,
    pub col_title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

fn ramp(t: f64) -> Rgb<u8> {
    // dark blue -> teal -> pale yellow
    let t = t.clamp(0.0, 1.0);
    let stops = [(30.0, 40.0, 110.0), (40.0, 150.0, 140.0), (250.0, 240.0, 160.0)];
    let (a, b, u) = if t < 0.5 {
        (stops[0], stops[1], t * 2.0)
    } else {
        (stops[1], stops[2], t * 2.0 - 1.0)
    };
    let mix = |p: f64, q: f64| (p + (q - p) * u).round() as u8;
    Rgb([mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2)])
}

impl Heatmap {
    fn range(&self) -> (f64, f64) {
        let vals: Vec<f64> = self.values.iter().flatten().flatten().copied().collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if vals.is_empty() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    }

    fn colour(&self, v: Option<f64>) -> Rgb<u8> {
        let (lo, hi) = self.range();
        v.map(|v| ramp((v - lo) / (hi - lo))).unwrap_or(Rgb([200, 200, 200]))
    }

    fn cell(&self) -> (f64, f64) {
        let rows = self.values.len().max(1) as f64;
        let cols = self.col_labels.len().max(1) as f64;
        ((W as f64 - 2.0 * MARGIN) / cols, (H as f64 - 2.0 * MARGIN) / rows)
    }

    pub fn to_svg(&self) -> String {
        let (cw, ch) = self.cell();
        let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
        s.push('\n');
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2, escape(&self.title));
        for (r, row) in self.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let (x, y) = (MARGIN + c as f64 * cw, MARGIN + r as f64 * ch);
                let _ = writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{cw:.1}" height="{ch:.1}" fill="{}" stroke="white"/>"#,
                    hex(self.colour(*v))
                );
                let text = v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{text}</text>"#,
                    x + cw / 2.0,
                    y + ch / 2.0 + 4.0
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                MARGIN - 4.0,
                MARGIN + (r as f64 + 0.5) * ch + 4.0,
                escape(&self.row_labels.get(r).cloned().unwrap_or_default())
            );
        }
        for (c, label) in self.col_labels.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                MARGIN + (c as f64 + 0.5) * cw,
                H as f64 - MARGIN + 16.0,
                escape(label)
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2, H - 8, escape(&self.col_title));
        let _ = writeln!(
            s,
            r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">{}</text>"#,
            H / 2,
            H / 2,
            escape(&self.row_title)
        );
        s.push_str("</svg>\n");
        s
    }

    pub fn to_png(&self) -> RgbImage {
        let (cw, ch) = self.cell();
        let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
        for (r, row) in self.values.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let (x, y) = (MARGIN + c as f64 * cw, MARGIN + r as f64 * ch);
                fill_rect(&mut img, x + 1.0, y + 1.0, x + cw - 1.0, y + ch - 1.0, self.colour(*v));
            }
        }
        img
    }

    pub fn write(&self, stem: &Path) -> Result<()> {
        write_atomic(&stem.with_extension("svg"), self.to_svg().as_bytes())?;
        save_png(&self.to_png(), &stem.with_extension("png"))
    }
}

pub(crate) fn fill_rect(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, c: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let clamp = |v: f64, n: u32| v.round().clamp(0.0, n as f64) as u32;
    let (xa, xb) = (clamp(x0.min(x1), w), clamp(x0.max(x1), w));
    let (ya, yb) = (clamp(y0.min(y1), h), clamp(y0.max(y1), h));
    for y in ya..yb {
        for x in xa..xb {
            img.put_pixel(x, y, c);
        }
    }
}

fn fill_circle(img: &mut RgbImage, cx: f64, cy: f64, r: f64, c: Rgb<u8>) {
    let (w, h) = img.dimensions();
    for y in (cy - r).floor().max(0.0) as u32..((cy + r).ceil() as u32).min(h) {
        for x in (cx - r).floor().max(0.0) as u32..((cx + r).ceil() as u32).min(w) {
            if (x as f64 - cx).hypot(y as f64 - cy) <= r {
                img.put_pixel(x, y, c);
            }
        }
    }
}

pub(crate) fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bar_dot_svg_has_one_bar_and_dot_per_category() {
        let c = BarDotChart {
            title: "PSNR".into(),
            y_label: "dB".into(),
            categories: vec!["1".into(), "25".into(), "50".into(), "100".into()],
            bars: vec![Some(20.0), Some(21.0), None, Some(22.0)],
            dots: vec![Some(25.0); 4],
            bar_label: "artifact slices".into(),
            dot_label: "all slices".into(),
        };
        let svg = c.to_svg();
        // 3 bars plus the legend swatch and background
        assert_eq!(svg.matches("<rect").count(), 3 + 2);
        assert_eq!(svg.matches("<circle").count(), 4 + 1);
        assert_eq!(c.to_png().dimensions(), (W, H));
    }

    #[test]
    fn heatmap_cells() {
        let h = Heatmap {
            title: "t".into(),
            row_title: "alpha".into(),
            col_title: "beta".into(),
            row_labels: vec!["0.5".into(), "1".into(), "1.5".into()],
            col_labels: vec!["0.5".into(), "1".into(), "1.5".into()],
            values: vec![vec![Some(1.0), Some(2.0), Some(3.0)]; 3],
        };
        assert_eq!(h.to_svg().matches("<rect").count(), 9 + 1);
        let png = h.to_png();
        assert_ne!(png.get_pixel(60, 60), png.get_pixel(W - 60, 60));
    }
}

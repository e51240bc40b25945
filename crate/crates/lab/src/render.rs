//! PNG map rendering and hand-written SVG figures.

use std::fmt::Write as _;
use std::path::Path;

use base64::Engine as _;
use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use ndarray::Array2;

use phirec_core::io;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Colormap {
    Gray,
    /// Black → purple → orange → pale yellow.
    Heat,
}

const HEAT: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 4.0]),
    (0.25, [87.0, 16.0, 110.0]),
    (0.5, [188.0, 55.0, 84.0]),
    (0.75, [249.0, 142.0, 9.0]),
    (1.0, [252.0, 255.0, 164.0]),
];

impl Colormap {
    /// Colour of `t` in `[0, 1]`; values outside are clamped.
    pub fn rgb(self, t: f64) -> [u8; 3] {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        match self {
            Colormap::Gray => {
                let v = (t * 255.0).round() as u8;
                [v, v, v]
            }
            Colormap::Heat => {
                let i = HEAT
                    .iter()
                    .rposition(|&(s, _)| s <= t)
                    .unwrap_or(0)
                    .min(HEAT.len() - 2);
                let (s0, c0) = HEAT[i];
                let (s1, c1) = HEAT[i + 1];
                let f = (t - s0) / (s1 - s0);
                let mix = |k: usize| (c0[k] + f * (c1[k] - c0[k])).round() as u8;
                [mix(0), mix(1), mix(2)]
            }
        }
    }
}

/// Linear display range shared by every map rendered with it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scale {
    pub lo: f64,
    pub hi: f64,
}

impl Scale {
    /// `[0, max]` over all maps; a degenerate range becomes `[0, 1]`.
    pub fn shared<'a>(maps: impl IntoIterator<Item = &'a Array2<f32>>) -> Self {
        let hi = maps
            .into_iter()
            .flat_map(|m| m.iter())
            .filter(|v| v.is_finite())
            .fold(0.0f64, |m, &v| m.max(v as f64));
        Scale {
            lo: 0.0,
            hi: if hi > 0.0 { hi } else { 1.0 },
        }
    }

    fn unit(&self, v: f64) -> f64 {
        (v - self.lo) / (self.hi - self.lo)
    }
}

pub fn colorize(map: &Array2<f32>, scale: Scale, cmap: Colormap) -> RgbImage {
    let (h, w) = map.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb(cmap.rgb(scale.unit(map[(y as usize, x as usize)] as f64)))
    })
}

pub fn png_bytes(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf).write_image(
        img.as_raw(),
        img.width(),
        img.height(),
        ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

pub fn write_png(path: &Path, map: &Array2<f32>, scale: Scale, cmap: Colormap) -> Result<()> {
    let bytes = png_bytes(&colorize(map, scale, cmap))?;
    io::write_atomic(path, &bytes)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One line of a chart; `None` values are drawn as explicit gap markers.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, Option<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = [
    "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn nice_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo {
        0.08 * (hi - lo)
    } else {
        0.5 * lo.abs().max(1e-3)
    };
    (lo - pad, hi + pad)
}

/// Line chart over acceleration, one panel per setting stacked vertically.
pub fn line_chart_svg(title: &str, y_label: &str, panels: &[Panel]) -> String {
    let (pw, ph) = (460.0, 220.0);
    let (left, top, gap) = (70.0, 40.0, 60.0);
    let legend_w = 190.0;
    let width = left + pw + 20.0 + legend_w;
    let height = top + panels.len() as f64 * (ph + gap);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-size="15" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (pi, panel) in panels.iter().enumerate() {
        let y0 = top + pi as f64 * (ph + gap);
        let xs: Vec<f64> = {
            let mut xs: Vec<f64> = panel
                .series
                .iter()
                .flat_map(|s| s.points.iter().map(|p| p.0))
                .collect();
            xs.sort_by(f64::total_cmp);
            xs.dedup();
            xs
        };
        let (lo, hi) = nice_range(
            panel
                .series
                .iter()
                .flat_map(|s| s.points.iter().filter_map(|p| p.1)),
        );
        let x_of = |a: f64| {
            let i = xs.iter().position(|&v| v == a).unwrap_or(0) as f64;
            let n = (xs.len().max(2) - 1) as f64;
            left + 30.0 + i / n * (pw - 60.0)
        };
        let y_of = |v: f64| y0 + ph - (v - lo) / (hi - lo) * ph;
        let _ = writeln!(
            svg,
            r##"<rect x="{left}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="13">{}</text>"#,
            left,
            y0 - 8.0,
            escape(&panel.title)
        );
        for k in 0..=4 {
            let v = lo + (hi - lo) * k as f64 / 4.0;
            let y = y_of(v);
            let _ = writeln!(
                svg,
                r##"<line x1="{}" y1="{y:.1}" x2="{left}" y2="{y:.1}" stroke="#333"/><text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
                left - 4.0,
                left - 6.0,
                y + 4.0
            );
        }
        for &a in &xs {
            let x = x_of(a);
            let _ = writeln!(
                svg,
                r#"<text x="{x:.1}" y="{}" text-anchor="middle">{a}x</text>"#,
                y0 + ph + 16.0
            );
        }
        let _ = writeln!(
            svg,
            r#"<text transform="translate({},{}) rotate(-90)" text-anchor="middle">{}</text>"#,
            left - 50.0,
            y0 + ph / 2.0,
            escape(y_label)
        );
        for (si, s) in panel.series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let mut run: Vec<(f64, f64)> = Vec::new();
            let flush = |run: &mut Vec<(f64, f64)>, svg: &mut String| {
                if run.len() > 1 {
                    let pts: Vec<String> =
                        run.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                    let _ = writeln!(
                        svg,
                        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                        pts.join(" ")
                    );
                }
                run.clear();
            };
            for &(a, v) in &s.points {
                let x = x_of(a);
                match v.filter(|v| v.is_finite()) {
                    Some(v) => {
                        let y = y_of(v);
                        run.push((x, y));
                        let _ = writeln!(
                            svg,
                            r#"<circle cx="{x:.1}" cy="{y:.1}" r="3.5" fill="{color}"/>"#
                        );
                    }
                    None => {
                        flush(&mut run, &mut svg);
                        let y = y0 + ph - 12.0;
                        let _ = writeln!(
                            svg,
                            r#"<g class="gap"><path d="M{:.1},{:.1} l8,8 m0,-8 l-8,8" stroke="{color}" stroke-width="2"/><text x="{x:.1}" y="{:.1}" text-anchor="middle" fill="{color}">n/a</text></g>"#,
                            x - 4.0,
                            y - 4.0,
                            y - 8.0
                        );
                    }
                }
            }
            flush(&mut run, &mut svg);
            let ly = y0 + 14.0 + si as f64 * 18.0;
            let lx = left + pw + 20.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 18.0,
                lx + 24.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grid of images with column and row labels; `None` cells become gap markers.
pub fn gallery_svg(
    title: &str,
    columns: &[String],
    rows: &[(String, Vec<Option<Vec<u8>>>)],
    cell: u32,
) -> String {
    let cell = cell as f64;
    let (left, top, pad) = (120.0, 54.0, 6.0);
    let width = left + columns.len() as f64 * (cell + pad) + pad;
    let height = top + rows.len() as f64 * (cell + pad) + pad;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="18" font-size="14" text-anchor="middle">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for (ci, c) in columns.iter().enumerate() {
        let x = left + ci as f64 * (cell + pad) + cell / 2.0;
        let _ = writeln!(
            svg,
            r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#,
            top - 8.0,
            escape(c)
        );
    }
    let engine = base64::engine::general_purpose::STANDARD;
    for (ri, (label, cells)) in rows.iter().enumerate() {
        let y = top + ri as f64 * (cell + pad);
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 8.0,
            y + cell / 2.0 + 4.0,
            escape(label)
        );
        for (ci, png) in cells.iter().enumerate() {
            let x = left + ci as f64 * (cell + pad);
            match png {
                Some(bytes) => {
                    let _ = writeln!(
                        svg,
                        r#"<image x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" style="image-rendering:pixelated" href="data:image/png;base64,{}"/>"#,
                        engine.encode(bytes)
                    );
                }
                None => {
                    let _ = writeln!(
                        svg,
                        r##"<g class="gap"><rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="#eee" stroke="#999" stroke-dasharray="4 3"/><text x="{:.1}" y="{:.1}" text-anchor="middle" fill="#666">n/a</text></g>"##,
                        x + cell / 2.0,
                        y + cell / 2.0 + 4.0
                    );
                }
            }
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormaps_hit_their_endpoints() {
        assert_eq!(Colormap::Gray.rgb(0.0), [0, 0, 0]);
        assert_eq!(Colormap::Gray.rgb(1.0), [255, 255, 255]);
        assert_eq!(Colormap::Heat.rgb(0.0), [0, 0, 4]);
        assert_eq!(Colormap::Heat.rgb(1.0), [252, 255, 164]);
        assert_eq!(Colormap::Heat.rgb(2.0), Colormap::Heat.rgb(1.0));
        assert_eq!(Colormap::Heat.rgb(f64::NAN), Colormap::Heat.rgb(0.0));
    }

    #[test]
    fn shared_scale_uses_the_batch_maximum() {
        let a = Array2::from_elem((2, 2), 0.5f32);
        let b = Array2::from_elem((2, 2), 2.0f32);
        let s = Scale::shared([&a, &b]);
        assert_eq!(s, Scale { lo: 0.0, hi: 2.0 });
        // the same value renders identically wherever it appears
        assert_eq!(
            colorize(&a, s, Colormap::Heat).get_pixel(0, 0),
            colorize(&a, s, Colormap::Heat).get_pixel(1, 1)
        );
        assert_ne!(
            colorize(&a, s, Colormap::Heat),
            colorize(&a, Scale::shared([&a]), Colormap::Heat)
        );
        assert_eq!(
            Scale::shared([&Array2::zeros((2, 2))]),
            Scale { lo: 0.0, hi: 1.0 }
        );
    }

    #[test]
    fn png_roundtrip() {
        let m = Array2::from_shape_fn((3, 5), |(y, x)| (y * 5 + x) as f32);
        let img = colorize(&m, Scale::shared([&m]), Colormap::Gray);
        let back = image::load_from_memory(&png_bytes(&img).unwrap())
            .unwrap()
            .to_rgb8();
        assert_eq!(back, img);
        assert_eq!((back.width(), back.height()), (5, 3));
    }

    #[test]
    fn renders_are_byte_stable() {
        let m = Array2::from_shape_fn((8, 8), |(y, x)| (y * x) as f32);
        let png = png_bytes(&colorize(&m, Scale::shared([&m]), Colormap::Heat)).unwrap();
        let cells = vec![("gamma".to_string(), vec![Some(png.clone()), None])];
        let svg = gallery_svg("g", &["4x→4x".into(), "4x→8x".into()], &cells, 32);
        assert_eq!(phirec_core::io::digest_bytes(&png), PNG_DIGEST);
        assert_eq!(
            phirec_core::io::digest_bytes(svg.as_bytes()),
            GALLERY_DIGEST
        );
    }

    const PNG_DIGEST: &str = "db7d1c0eb02c26f7c30e53c68b55e2654cc563283df5043cd2aa8e95796da249";
    const GALLERY_DIGEST: &str = "6a15ebd6e7944a3ca9c37608ab7a5ee349c6ae35d977b9d76a1fea4095de035d";

    #[test]
    fn charts_mark_missing_values() {
        let panel = Panel {
            title: "ID".into(),
            series: vec![Series {
                label: "a".into(),
                points: vec![(4.0, Some(0.9)), (8.0, None), (16.0, Some(0.7))],
            }],
        };
        let svg = line_chart_svg("ssim", "SSIM", &[panel]);
        assert_eq!(svg.matches(r#"class="gap""#).count(), 1);
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("16x"));
    }

    #[test]
    fn galleries_label_and_mark_cells() {
        let m = Array2::from_elem((4, 4), 1.0f32);
        let png = png_bytes(&colorize(&m, Scale::shared([&m]), Colormap::Gray)).unwrap();
        let svg = gallery_svg(
            "g",
            &["4x→8x".to_string(), "4x→16x".to_string()],
            &[("variance".into(), vec![Some(png), None])],
            64,
        );
        assert!(svg.contains("4x→16x"));
        assert_eq!(svg.matches("<image").count(), 1);
        assert_eq!(svg.matches(r#"class="gap""#).count(), 1);
    }
}

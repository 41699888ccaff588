//! 8-bit PNG output: blue-to-red probability heatmaps and ROC plots.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::RocCurve;
use crate::raster::Raster;

/// RGBA image buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 4]>,
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [u8; 4]) -> Self {
        Image {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn put(&mut self, x: i64, y: i64, color: [u8; 4]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.pixels[y as usize * self.width + x as usize] = color;
        }
    }

    /// Bresenham line, `thickness` pixels wide.
    pub fn line(
        &mut self,
        (x0, y0): (i64, i64),
        (x1, y1): (i64, i64),
        color: [u8; 4],
        thickness: i64,
    ) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let half = thickness / 2;
        loop {
            for oy in -half..=half {
                for ox in -half..=half {
                    self.put(x + ox, y + oy, color);
                }
            }
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc =
            png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgba);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&bytes))
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// Blue (0) through white (0.5) to red (1).
pub fn ramp(p: f32) -> [u8; 4] {
    let p = p.clamp(0.0, 1.0);
    let lerp = |a: f32, b: f32, t: f32| (a + (b - a) * t).round() as u8;
    if p < 0.5 {
        let t = p * 2.0;
        [
            lerp(33.0, 247.0, t),
            lerp(102.0, 247.0, t),
            lerp(172.0, 247.0, t),
            255,
        ]
    } else {
        let t = (p - 0.5) * 2.0;
        [
            lerp(247.0, 178.0, t),
            lerp(247.0, 24.0, t),
            lerp(247.0, 43.0, t),
            255,
        ]
    }
}

/// Heatmap of a probability raster; invalid cells are transparent. Values are
/// mapped through `[0, vmax]` so that low base rates remain visible.
pub fn heatmap(map: &Raster, vmax: f32) -> Image {
    let vmax = if vmax > 0.0 { vmax } else { 1.0 };
    let mut img = Image::new(map.cols(), map.rows(), [0, 0, 0, 0]);
    for (i, px) in img.pixels.iter_mut().enumerate() {
        if map.valid[i] {
            *px = ramp(map.values[i] / vmax);
        }
    }
    img
}

const PALETTE: [[u8; 4]; 6] = [
    [128, 128, 128, 255],
    [31, 119, 180, 255],
    [44, 160, 44, 255],
    [255, 127, 14, 255],
    [148, 103, 189, 255],
    [214, 39, 40, 255],
];

/// Square ROC plot with the chance diagonal and one colored curve per entry.
pub fn roc_plot(curves: &[(&str, &RocCurve)], size: usize) -> Image {
    let size = size.max(64);
    let margin = (size / 12) as i64;
    let span = size as i64 - 2 * margin;
    let mut img = Image::new(size, size, [255, 255, 255, 255]);
    let to_px = |fpr: f64, tpr: f64| {
        (
            margin + (fpr * span as f64).round() as i64,
            margin + span - (tpr * span as f64).round() as i64,
        )
    };
    let black = [0, 0, 0, 255];
    let grid = [225, 225, 225, 255];
    for k in 1..10 {
        let v = k as f64 / 10.0;
        img.line(to_px(v, 0.0), to_px(v, 1.0), grid, 1);
        img.line(to_px(0.0, v), to_px(1.0, v), grid, 1);
    }
    img.line(to_px(0.0, 0.0), to_px(1.0, 1.0), [170, 170, 170, 255], 1);
    for (k, (_, curve)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for w in curve.points.windows(2) {
            img.line(to_px(w[0].0, w[0].1), to_px(w[1].0, w[1].1), color, 3);
        }
    }
    for (a, b) in [
        ((0.0, 0.0), (1.0, 0.0)),
        ((0.0, 0.0), (0.0, 1.0)),
        ((1.0, 0.0), (1.0, 1.0)),
        ((0.0, 1.0), (1.0, 1.0)),
    ] {
        img.line(to_px(a.0, a.1), to_px(b.0, b.1), black, 1);
    }
    img
}

/// Color assigned to the `k`-th curve of [`roc_plot`].
pub fn curve_color(k: usize) -> [u8; 4] {
    PALETTE[k % PALETTE.len()]
}

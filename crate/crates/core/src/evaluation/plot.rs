//! Minimal raster charts for ablation reports: bars per arm and per-frame
//! curves, one colour per arm. Charts carry no text; the colour legend is
//! recorded alongside the numbers in the report files.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 32;
const PALETTE: [[u8; 3]; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [23, 190, 207],
];
const FAILED: [u8; 3] = [160, 160, 160];
const GRID: [u8; 3] = [225, 225, 225];
const AXIS: [u8; 3] = [0, 0, 0];

pub fn color_hex(i: usize) -> String {
    let [r, g, b] = PALETTE[i % PALETTE.len()];
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// Value range padded to whole units and never empty.
fn value_range(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return None;
    }
    let pad = ((hi - lo) * 0.1).max(0.05);
    Some((lo - pad, hi + pad))
}

struct Canvas {
    img: RgbImage,
    lo: f64,
    hi: f64,
}

impl Canvas {
    fn new(lo: f64, hi: f64) -> Self {
        let mut c = Self { img: RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255])), lo, hi };
        let step = grid_step(hi - lo);
        let mut v = (lo / step).ceil() * step;
        while v <= hi {
            let y = c.y_of(v);
            c.hline(MARGIN, WIDTH - MARGIN, y, GRID);
            v += step;
        }
        c.hline(MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN, AXIS);
        c.vline(MARGIN, MARGIN, HEIGHT - MARGIN, AXIS);
        c
    }

    fn y_of(&self, v: f64) -> u32 {
        let span = (HEIGHT - 2 * MARGIN) as f64;
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        HEIGHT - MARGIN - (t * span).round() as u32
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < WIDTH && (y as u32) < HEIGHT {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    fn hline(&mut self, x0: u32, x1: u32, y: u32, c: [u8; 3]) {
        (x0..=x1).for_each(|x| self.put(x as i64, y as i64, c));
    }

    fn vline(&mut self, x: u32, y0: u32, y1: u32, c: [u8; 3]) {
        (y0..=y1).for_each(|y| self.put(x as i64, y as i64, c));
    }

    fn rect(&mut self, x0: u32, x1: u32, y0: u32, y1: u32, c: [u8; 3]) {
        for x in x0..x1 {
            self.vline(x, y0.min(y1), y0.max(y1), c);
        }
    }

    /// Bresenham segment, two pixels thick.
    fn segment(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            self.put(x, y + 1, c);
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

    fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| Error::format(path, e.to_string()))
    }
}

fn grid_step(span: f64) -> f64 {
    [0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0].into_iter().find(|s| span / s <= 12.0).unwrap_or(20.0)
}

/// One bar per arm; `None` marks a failed arm, drawn as a grey stub.
pub fn bar_chart(values: &[Option<f64>], path: &Path) -> Result<()> {
    let (lo, hi) = value_range(values.iter().flatten().copied()).unwrap_or((0.0, 1.0));
    let mut c = Canvas::new(lo, hi);
    let n = values.len().max(1) as u32;
    let slot = (WIDTH - 2 * MARGIN) / n;
    let base = HEIGHT - MARGIN;
    for (i, v) in values.iter().enumerate() {
        let x0 = MARGIN + i as u32 * slot + slot / 6;
        let x1 = MARGIN + (i as u32 + 1) * slot - slot / 6;
        match v.filter(|v| v.is_finite()) {
            Some(v) => {
                let top = c.y_of(v);
                c.rect(x0, x1, top, base - 1, PALETTE[i % PALETTE.len()]);
            }
            None => c.rect(x0, x1, base - 6, base - 1, FAILED),
        }
    }
    c.save(path)
}

/// One polyline per arm over the frame index.
pub fn line_chart(series: &[Vec<f64>], path: &Path) -> Result<()> {
    let (lo, hi) = value_range(series.iter().flatten().copied()).unwrap_or((0.0, 1.0));
    let mut c = Canvas::new(lo, hi);
    let len = series.iter().map(Vec::len).max().unwrap_or(0);
    let x_of = |k: usize| {
        let span = (WIDTH - 2 * MARGIN) as f64;
        MARGIN as i64 + if len > 1 { (k as f64 * span / (len - 1) as f64).round() as i64 } else { 0 }
    };
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(i64, i64)> =
            s.iter().enumerate().filter(|(_, v)| v.is_finite()).map(|(k, &v)| (x_of(k), c.y_of(v) as i64)).collect();
        for w in pts.windows(2) {
            c.segment(w[0], w[1], PALETTE[i % PALETTE.len()]);
        }
        if let [p] = pts[..] {
            c.segment(p, p, PALETTE[i % PALETTE.len()]);
        }
    }
    c.save(path)
}

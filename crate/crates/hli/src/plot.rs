//! Minimal line-chart rendering to PNG: axes, grid ticks, and one colored
//! polyline per series. Intended for offline inspection of CMC curves and
//! ablation sweeps.

use image::{Rgb, RgbImage};
use std::path::Path;

use crate::error::{HliError, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 480;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [127, 127, 127],
];

#[derive(Debug, Clone)]
pub struct Series {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Series {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Self {
        Self { xs, ys }
    }
}

/// Render the series as polylines on shared axes and write a PNG.
pub fn plot_lines(series: &[Series], path: &Path) -> Result<()> {
    if series.is_empty() || series.iter().any(|s| s.xs.len() != s.ys.len() || s.xs.is_empty()) {
        return Err(HliError::InvalidArgument(
            "plot needs at least one non-empty series with matching lengths".into(),
        ));
    }
    let all_finite = series
        .iter()
        .flat_map(|s| s.xs.iter().chain(&s.ys))
        .all(|v| v.is_finite());
    if !all_finite {
        return Err(HliError::InvalidArgument("non-finite plot values".into()));
    }

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &x in &s.xs {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
        }
        for &y in &s.ys {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if x_max - x_min < 1e-12 {
        x_max = x_min + 1.0;
    }
    if y_max - y_min < 1e-12 {
        y_max = y_min + 1.0;
    }

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - x_min) / (x_max - x_min);
        let fy = (y - y_min) / (y_max - y_min);
        let px = MARGIN as f64 + fx * (WIDTH - 2 * MARGIN) as f64;
        let py = (HEIGHT - MARGIN) as f64 - fy * (HEIGHT - 2 * MARGIN) as f64;
        (px.round() as i64, py.round() as i64)
    };

    let axis = Rgb([0, 0, 0]);
    draw_line(&mut img, to_px(x_min, y_min), to_px(x_max, y_min), axis);
    draw_line(&mut img, to_px(x_min, y_min), to_px(x_min, y_max), axis);
    // Tick marks at quarters of each axis.
    for i in 0..=4 {
        let fx = x_min + (x_max - x_min) * i as f64 / 4.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 4.0;
        let (px, py0) = to_px(fx, y_min);
        draw_line(&mut img, (px, py0), (px, py0 + 5), axis);
        let (px0, py) = to_px(x_min, fy);
        draw_line(&mut img, (px0, py), (px0 - 5, py), axis);
    }

    for (k, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let pts: Vec<(i64, i64)> = s.xs.iter().zip(&s.ys).map(|(&x, &y)| to_px(x, y)).collect();
        for w in pts.windows(2) {
            draw_line(&mut img, w[0], w[1], color);
        }
        for &(px, py) in &pts {
            draw_dot(&mut img, px, py, color);
        }
    }

    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save(path)
        .map_err(|e| HliError::InvalidArgument(format!("cannot write plot: {e}")))?;
    Ok(())
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_dot(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, x + dx, y + dy, color);
        }
    }
}

/// Bresenham line.
fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        put(img, x, y, color);
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

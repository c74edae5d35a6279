//! Minimal raster line plots: axes, a light grid and one polyline per
//! series. No text; the CSV next to each image carries the numbers.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 40;
const PALETTE: [[u8; 3]; 5] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [148, 103, 189], [255, 127, 14]];

pub struct Series {
    pub points: Vec<(f64, f64)>,
}

/// Data range padded so flat series still get a visible box.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for (ox, oy) in [(0, 0), (1, 0), (0, 1)] {
            let (px, py) = (x + ox, y + oy);
            if px >= 0 && py >= 0 && (px as u32) < img.width() && (py as u32) < img.height() {
                img.put_pixel(px as u32, py as u32, color);
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

/// Draws `series` into a PNG. Fixed axis ranges may be given; otherwise
/// they fit the data.
pub fn render(path: &Path, series: &[Series], x_range: Option<(f64, f64)>, y_range: Option<(f64, f64)>) -> Result<()> {
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::InvalidData("nothing to plot".into()));
    }
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = x_range.unwrap_or_else(|| range(all().map(|p| p.0)));
    let (y0, y1) = y_range.unwrap_or_else(|| range(all().map(|p| p.1)));
    let (pw, ph) = ((WIDTH - 2 * MARGIN) as f64, (HEIGHT - 2 * MARGIN) as f64);
    let to_px = |(x, y): (f64, f64)| {
        let px = MARGIN as f64 + (x - x0) / (x1 - x0) * pw;
        let py = (HEIGHT - MARGIN) as f64 - (y - y0) / (y1 - y0) * ph;
        (px.round() as i64, py.round() as i64)
    };

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let grid = Rgb([225, 225, 225]);
    for k in 1..4 {
        let f = k as f64 / 4.0;
        let gx = to_px((x0 + f * (x1 - x0), y0));
        let gy = to_px((x0, y0 + f * (y1 - y0)));
        line(&mut img, (gx.0, MARGIN as i64), (gx.0, (HEIGHT - MARGIN) as i64), grid);
        line(&mut img, (MARGIN as i64, gy.1), ((WIDTH - MARGIN) as i64, gy.1), grid);
    }
    let axis = Rgb([0, 0, 0]);
    let (ox, oy) = (MARGIN as i64, (HEIGHT - MARGIN) as i64);
    line(&mut img, (ox, oy), ((WIDTH - MARGIN) as i64, oy), axis);
    line(&mut img, (ox, oy), (ox, MARGIN as i64), axis);

    for (i, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        let px: Vec<_> = s.points.iter().map(|&p| to_px(p)).collect();
        if let [only] = px[..] {
            line(&mut img, only, only, color);
        }
        for w in px.windows(2) {
            line(&mut img, w[0], w[1], color);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Internal(format!("{}: {e}", dir.display())))?;
    }
    img.save(path).map_err(|e| Error::Internal(format!("{}: {e}", path.display())))
}

/// Step-wise PR curve: precision holds until the next recall level.
pub fn pr_steps(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut prev_recall = 0.0;
    for &(r, p) in points {
        out.push((prev_recall, p));
        out.push((r, p));
        prev_recall = r;
    }
    out
}

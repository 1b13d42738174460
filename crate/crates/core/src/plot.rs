//! Minimal PNG charts: error curves with shaded CI bands and trajectory overlays.
//! No text is drawn; series order matches the CSV/JSON column order.

use image::{Rgb, RgbImage};

use crate::geometry::Point;
use crate::raster::SemanticImage;
use crate::traj::ModalPredictionSet;

/// Mode colors in rank order: orange, green, purple, then extras.
pub const PALETTE: [[u8; 3]; 6] = [[255, 140, 0], [0, 170, 0], [150, 60, 200], [30, 110, 230], [220, 30, 30], [120, 120, 120]];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
    pub ci: Vec<f64>,
}

const W: u32 = 640;
const H: u32 = 400;
const MARGIN: f64 = 40.0;

fn blend(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3], alpha: f64) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    let p = img.get_pixel_mut(x as u32, y as u32);
    for k in 0..3 {
        p.0[k] = (p.0[k] as f64 * (1.0 - alpha) + c[k] as f64 * alpha).round() as u8;
    }
}

fn dot(img: &mut RgbImage, x: f64, y: f64, r: i64, c: [u8; 3]) {
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                blend(img, cx + dx, cy + dy, c, 1.0);
            }
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), thick: i64, c: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        dot(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), thick, c);
    }
}

/// Steps `1..=T` on x, values on y from zero, one color per series.
pub fn line_chart(series: &[Series]) -> RgbImage {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let horizon = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(2);
    let top = series
        .iter()
        .flat_map(|s| s.values.iter().zip(s.ci.iter().chain(std::iter::repeat(&0.0))).map(|(v, c)| v + c))
        .fold(0.0f64, f64::max);
    let top = if top > 0.0 && top.is_finite() { top * 1.1 } else { 1.0 };
    let (x0, x1, y0, y1) = (MARGIN, W as f64 - MARGIN, H as f64 - MARGIN, MARGIN);
    let px = |t: f64| x0 + (t - 1.0) / (horizon as f64 - 1.0) * (x1 - x0);
    let py = |v: f64| y0 - v / top * (y0 - y1);

    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        // Band: per pixel column, interpolate the CI envelope.
        for x in x0.ceil() as i64..=x1.floor() as i64 {
            let t = 1.0 + (x as f64 - x0) / (x1 - x0) * (horizon as f64 - 1.0);
            let i = (t.floor() as usize).saturating_sub(1).min(s.values.len().saturating_sub(2));
            if s.values.len() < 2 || t > s.values.len() as f64 {
                continue;
            }
            let f = t - (i + 1) as f64;
            let at = |v: &[f64]| v.get(i).copied().unwrap_or(0.0) * (1.0 - f) + v.get(i + 1).copied().unwrap_or(0.0) * f;
            let (m, c) = (at(&s.values), at(&s.ci));
            for y in py(m + c).round() as i64..=py((m - c).max(0.0)).round() as i64 {
                blend(&mut img, x, y, color, 0.2);
            }
        }
    }
    line(&mut img, (x0, y0), (x1, y0), 0, [0, 0, 0]);
    line(&mut img, (x0, y0), (x0, y1), 0, [0, 0, 0]);
    for t in 1..=horizon {
        line(&mut img, (px(t as f64), y0), (px(t as f64), y0 + 5.0), 0, [0, 0, 0]);
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        for (i, w) in s.values.windows(2).enumerate() {
            line(&mut img, (px(i as f64 + 1.0), py(w[0])), (px(i as f64 + 2.0), py(w[1])), 1, color);
        }
        for (i, &v) in s.values.iter().enumerate() {
            dot(&mut img, px(i as f64 + 1.0), py(v), 3, color);
        }
        // Legend swatch.
        let lx = x1 - 20.0 - 16.0 * (series.len() - 1 - k) as f64;
        for dy in 0..10 {
            for dx in 0..10 {
                blend(&mut img, lx as i64 + dx, (y1 - 25.0) as i64 + dy, color, 1.0);
            }
        }
    }
    img
}

/// The raster upscaled by `scale` with each mode drawn in rank color and the ground
/// truth (if any) in white.
pub fn trajectory_overlay(base: &SemanticImage, modes: &ModalPredictionSet, truth: Option<&[[f64; 3]]>, scale: u32) -> RgbImage {
    let spec = *base.spec();
    let scale = scale.max(1);
    let small = base.to_rgb_image();
    let mut img = image::imageops::resize(&small, small.width() * scale, small.height() * scale, image::imageops::FilterType::Nearest);
    let to_px = |s: &[f64; 3]| {
        let (r, c) = spec.world_to_pixel(Point::new(s[0], s[1]));
        (c * scale as f64, r * scale as f64)
    };
    let draw = |img: &mut RgbImage, states: &[[f64; 3]], color: [u8; 3]| {
        let mut prev = to_px(&[0.0; 3]);
        for s in states {
            let p = to_px(s);
            line(img, prev, p, 1, color);
            dot(img, p.0, p.1, 2, color);
            prev = p;
        }
    };
    if let Some(t) = truth {
        draw(&mut img, t, [255, 255, 255]);
    }
    for (k, m) in modes.modes.iter().enumerate().rev() {
        draw(&mut img, &m.states, PALETTE[k % PALETTE.len()]);
    }
    img
}

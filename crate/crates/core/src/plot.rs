//! Minimal line charts written as PNG, for loss and mAP curves.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;

const WIDTH: u32 = 480;
const HEIGHT: u32 = 240;
const MARGIN: u32 = 16;

/// One polyline; point `i` sits at x = `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub values: Vec<f64>,
    pub colour: [u8; 3],
}

fn draw_line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), colour: Rgb<u8>) {
    let steps = (x1 - x0).abs().max((y1 - y0).abs()).ceil().max(1.0) as usize;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, colour);
        }
    }
}

/// Render all series on shared axes scaled to their joint range.
/// Non-finite values are skipped.
pub fn render(series: &[Series]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([120, 120, 120]);
    let (left, right, top, bottom) = (MARGIN as f64, (WIDTH - MARGIN) as f64, MARGIN as f64, (HEIGHT - MARGIN) as f64);
    draw_line(&mut img, (left, bottom), (right, bottom), axis);
    draw_line(&mut img, (left, top), (left, bottom), axis);

    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return img;
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    let longest = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let dx = if longest > 1 { (right - left) / (longest - 1) as f64 } else { 0.0 };
    for s in series {
        let colour = Rgb(s.colour);
        let mut prev: Option<(f64, f64)> = None;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let p = (left + i as f64 * dx, bottom - (v - lo) / span * (bottom - top));
            draw_line(&mut img, prev.unwrap_or(p), p, colour);
            prev = Some(p);
        }
    }
    img
}

pub fn plot_series(path: &Path, series: &[Series]) -> Result<()> {
    render(series).save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_in_series_colour() {
        let img = render(&[Series { values: vec![1.0, 0.5, f64::NAN, 0.2], colour: [200, 0, 0] }]);
        assert_eq!(img.dimensions(), (WIDTH, HEIGHT));
        assert!(img.pixels().any(|p| *p == Rgb([200, 0, 0])));
    }

    #[test]
    fn empty_series_gives_axes_only() {
        let img = render(&[]);
        assert!(!img.pixels().any(|p| p.0[0] != p.0[1]));
    }
}

//! Shared numeric and geometric primitives: boxes, feature maps, cosine
//! similarity, centerness, IoU and centre distance.

use serde::{Deserialize, Serialize};

use crate::error::{FgrrError, Result};
use crate::tensor::Matrix;

/// Axis-aligned box in pixel coordinates, `x1 <= x2`, `y1 <= y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) || x1 > x2 || y1 > y2 {
            return Err(FgrrError::Precondition(format!("invalid box {b:?}")));
        }
        Ok(b)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            x1: self.x1 * factor,
            y1: self.y1 * factor,
            x2: self.x2 * factor,
            y2: self.y2 * factor,
        }
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clipped(&self, width: f64, height: f64) -> Self {
        let x1 = self.x1.clamp(0.0, width);
        let y1 = self.y1.clamp(0.0, height);
        Self {
            x1,
            y1,
            x2: self.x2.clamp(x1, width),
            y2: self.y2.clamp(y1, height),
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Backbone depth a feature map was tapped from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Shallow,
    Deep,
}

/// `C x H x W` feature map stored pixel-major: row `y * W + x` of `pixels`
/// holds the `C` channel values of pixel `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub stage: Stage,
    height: usize,
    width: usize,
    pixels: Matrix,
}

impl FeatureMap {
    pub fn from_pixels(stage: Stage, height: usize, width: usize, pixels: Matrix) -> Result<Self> {
        if height == 0 || width == 0 || pixels.cols() == 0 {
            return Err(FgrrError::Shape("feature map dimensions must be positive".into()));
        }
        if pixels.rows() != height * width {
            return Err(FgrrError::Shape(format!(
                "{} pixel rows for a {height}x{width} map",
                pixels.rows()
            )));
        }
        if !pixels.all_finite() {
            return Err(FgrrError::Precondition("feature map has non-finite entries".into()));
        }
        Ok(Self {
            stage,
            height,
            width,
            pixels,
        })
    }

    /// Build from channel-major `[C, H, W]` data.
    pub fn from_chw(stage: Stage, channels: usize, height: usize, width: usize, data: &[f64]) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(FgrrError::Shape(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            )));
        }
        let mut pixels = Matrix::zeros(height * width, channels);
        for c in 0..channels {
            for p in 0..height * width {
                pixels.set(p, c, data[c * height * width + p]);
            }
        }
        Self::from_pixels(stage, height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.pixels.cols()
    }

    pub fn pixels(&self) -> &Matrix {
        &self.pixels
    }

    pub fn into_pixels(self) -> Matrix {
        self.pixels
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize) -> usize {
        y * self.width + x
    }

    pub fn feature(&self, y: usize, x: usize) -> &[f64] {
        self.pixels.row(self.index(y, x))
    }
}

/// A pixel of a feature map with an optional class label in `1..=K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelRef {
    pub y: usize,
    pub x: usize,
    pub label: Option<usize>,
}

/// Cosine similarity plus a flag raised when either input has zero norm
/// (the value is then defined as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub zero_norm: bool,
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Cosine {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different lengths");
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Cosine {
            value: 0.0,
            zero_norm: true,
        };
    }
    Cosine {
        value: (dot / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0),
        zero_norm: false,
    }
}

/// `sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b))` from the distances of a
/// pixel to the left, right, top and bottom box sides.
pub fn centerness(l: f64, r: f64, t: f64, b: f64) -> Result<f64> {
    if l < 0.0 || r < 0.0 || t < 0.0 || b < 0.0 {
        return Err(FgrrError::Precondition(format!(
            "pixel outside box (l={l}, r={r}, t={t}, b={b})"
        )));
    }
    if l + r <= 0.0 || t + b <= 0.0 {
        return Err(FgrrError::Precondition("box has zero extent".into()));
    }
    Ok((l.min(r) / l.max(r) * (t.min(b) / t.max(b))).sqrt())
}

/// Intersection over union. Any zero-area box yields 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if area_a <= 0.0 || area_b <= 0.0 {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    (inter / (area_a + area_b - inter)).min(1.0)
}

/// Euclidean distance between box centres divided by the image diagonal.
pub fn center_distance(a: &BBox, b: &BBox, image_diagonal: f64) -> Result<f64> {
    if !(image_diagonal > 0.0) {
        return Err(FgrrError::Precondition(format!(
            "image diagonal must be positive, got {image_diagonal}"
        )));
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    Ok((ax - bx).hypot(ay - by) / image_diagonal)
}

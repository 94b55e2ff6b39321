//! Box parameterizations, overlap scores and greedy NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box corners out of order: ({x1}, {y1}, {x2}, {y2})")]
    Unordered { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box has a non-finite coordinate")]
    NonFinite,
    #[error("box size 2^{exponent} overflows")]
    Overflow { exponent: f64 },
    #[error("box has zero width or height and no log-scale form")]
    Degenerate,
}

/// Axis-aligned box in corner form, pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x1 > x2 || y1 > y2 {
            return Err(GeometryError::Unordered { x1, y1, x2, y2 });
        }
        Ok(BoxXYXY { x1, y1, x2, y2 })
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

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BoxXYXY {
        BoxXYXY {
            x1: self.x1 + dx,
            y1: self.y1 + dy,
            x2: self.x2 + dx,
            y2: self.y2 + dy,
        }
    }

    /// Center, log2 scale and log2 aspect ratio (height over width).
    pub fn to_xyzr(&self) -> Result<BoxXYZR, GeometryError> {
        let (w, h) = (self.width(), self.height());
        if w <= 0.0 || h <= 0.0 {
            return Err(GeometryError::Degenerate);
        }
        Ok(BoxXYZR {
            x: 0.5 * (self.x1 + self.x2),
            y: 0.5 * (self.y1 + self.y2),
            z: 0.5 * (w * h).log2(),
            r: (h / w).log2(),
        })
    }
}

impl TryFrom<[f64; 4]> for BoxXYXY {
    type Error = GeometryError;
    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BoxXYXY::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoxXYXY> for [f64; 4] {
    fn from(b: BoxXYXY) -> Self {
        b.to_array()
    }
}

/// Positional vector of a query: center, `z = log2(scale)`, `r = log2(aspect)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXYZR {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
}

impl BoxXYZR {
    /// Width `2^(z - r/2)` and height `2^(z + r/2)`.
    pub fn to_xyxy(&self) -> Result<BoxXYXY, GeometryError> {
        xyzr_to_xyxy(self)
    }
}

pub fn xyzr_to_xyxy(b: &BoxXYZR) -> Result<BoxXYXY, GeometryError> {
    if ![b.x, b.y, b.z, b.r].iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let (wz, hz) = (b.z - 0.5 * b.r, b.z + 0.5 * b.r);
    let (w, h) = (wz.exp2(), hz.exp2());
    if !w.is_finite() {
        return Err(GeometryError::Overflow { exponent: wz });
    }
    if !h.is_finite() {
        return Err(GeometryError::Overflow { exponent: hz });
    }
    BoxXYXY::new(b.x - 0.5 * w, b.y - 0.5 * h, b.x + 0.5 * w, b.y + 0.5 * h)
}

/// Image extent in pixels, used to normalize corner coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub fn new(width: f64, height: f64) -> Result<Self, GeometryError> {
        if !(width.is_finite() && height.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if width <= 0.0 || height <= 0.0 {
            return Err(GeometryError::Degenerate);
        }
        Ok(ImageSize { width, height })
    }

    /// Corners divided by (width, height, width, height).
    pub fn normalize(&self, b: &BoxXYXY) -> [f64; 4] {
        [b.x1 / self.width, b.y1 / self.height, b.x2 / self.width, b.y2 / self.height]
    }
}

impl TryFrom<[f64; 2]> for ImageSize {
    type Error = GeometryError;
    fn try_from(v: [f64; 2]) -> Result<Self, Self::Error> {
        ImageSize::new(v[0], v[1])
    }
}

impl From<ImageSize> for [f64; 2] {
    fn from(s: ImageSize) -> Self {
        [s.width, s.height]
    }
}

/// Annotated object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub category: usize,
}

fn intersection(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    iw * ih
}

pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    let enclosing = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

/// Derivative of [`giou`] with respect to the corners of `a`, in
/// `[x1, y1, x2, y2]` order. Undefined on the measure-zero set where
/// corners of the two boxes coincide; one side is chosen there.
pub fn giou_grad(a: &BoxXYXY, b: &BoxXYXY) -> [f64; 4] {
    let iw_raw = a.x2.min(b.x2) - a.x1.max(b.x1);
    let ih_raw = a.y2.min(b.y2) - a.y1.max(b.y1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclosing = ew * eh;
    if union <= 0.0 || enclosing <= 0.0 {
        return [0.0; 4];
    }

    let overlap = iw_raw > 0.0 && ih_raw > 0.0;
    // d inter / d corner
    let d_inter = if overlap {
        [
            if a.x1 > b.x1 { -ih } else { 0.0 },
            if a.y1 > b.y1 { -iw } else { 0.0 },
            if a.x2 < b.x2 { ih } else { 0.0 },
            if a.y2 < b.y2 { iw } else { 0.0 },
        ]
    } else {
        [0.0; 4]
    };
    let d_area = [-a.height(), -a.width(), a.height(), a.width()];
    let d_enc = [
        if a.x1 < b.x1 { -eh } else { 0.0 },
        if a.y1 < b.y1 { -ew } else { 0.0 },
        if a.x2 > b.x2 { eh } else { 0.0 },
        if a.y2 > b.y2 { ew } else { 0.0 },
    ];
    let mut g = [0.0; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        g[k] = d_inter[k] / union - inter * d_union / (union * union) + d_union / enclosing
            - union * d_enc[k] / (enclosing * enclosing);
    }
    g
}

/// Detection candidate for NMS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BoxXYXY,
    pub category: usize,
    pub score: f64,
}

/// Greedy per-category suppression. A box is dropped when a higher-ranked
/// kept box of the same category overlaps it with IoU above the threshold.
/// Ranking is by descending score, then ascending index. Returns kept
/// indexes in ascending order.
pub fn nms(predictions: &[ScoredBox], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .partial_cmp(&predictions[a].score)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let cand = &predictions[idx];
        let suppressed = kept.iter().any(|&k| {
            let other = &predictions[k];
            other.category == cand.category && iou(&other.bbox, &cand.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(idx);
        }
    }
    kept.sort_unstable();
    kept
}

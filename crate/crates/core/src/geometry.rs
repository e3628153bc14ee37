//! Axis-aligned box arithmetic in pixel coordinates.
//!
//! Boxes use the continuous-geometry convention: a box spans
//! `[x_min, x_max] × [y_min, y_max]` and its area is
//! `(x_max - x_min) * (y_max - y_min)`. On integer coordinates this agrees
//! exactly with counting the unit pixels the box covers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got {0:?}")]
    NonFinite([f64; 4]),
    #[error("box must have positive extent (x_min < x_max, y_min < y_max), got {0:?}")]
    Degenerate([f64; 4]),
    #[error("image size must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
}

/// Axis-aligned bounding box with strictly positive area.
///
/// Serialized as `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite(coords));
        }
        if !(x_min < x_max && y_min < y_max) {
            return Err(GeometryError::Degenerate(coords));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box from center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    /// Point-in-box test with inclusive edges.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Clip to `[0, width] × [0, height]`. `None` when nothing is left.
    pub fn clip_to(&self, img: ImageSize) -> Option<BBox> {
        let w = f64::from(img.width);
        let h = f64::from(img.height);
        BBox::new(
            self.x_min.max(0.0),
            self.y_min.max(0.0),
            self.x_max.min(w),
            self.y_max.min(h),
        )
        .ok()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Frame dimensions in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self, GeometryError> {
        if width == 0 || height == 0 {
            return Err(GeometryError::EmptyImage { width, height });
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

/// Intersection over union. Symmetric, 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Whether the center of `det` lies inside `gt` (edges inclusive).
pub fn centroid_inside(det: &BBox, gt: &BBox) -> bool {
    let (cx, cy) = det.center();
    gt.contains_point(cx, cy)
}

/// Whether `inner` lies entirely inside `outer` (edges inclusive).
pub fn contains(outer: &BBox, inner: &BBox) -> bool {
    inner.x_min >= outer.x_min
        && inner.y_min >= outer.y_min
        && inner.x_max <= outer.x_max
        && inner.y_max <= outer.y_max
}

/// Area of the union of `boxes`, each clipped to `img`, over the image area.
///
/// Coordinate-compression sweep over x slabs; overlapping regions count once.
pub fn union_area_fraction(boxes: &[BBox], img: ImageSize) -> f64 {
    let clipped: Vec<BBox> = boxes.iter().filter_map(|b| b.clip_to(img)).collect();
    if clipped.is_empty() {
        return 0.0;
    }
    union_area(&clipped) / img.area()
}

/// Exact area of the union of a set of boxes.
pub fn union_area(boxes: &[BBox]) -> f64 {
    let mut xs: Vec<f64> = boxes.iter().flat_map(|b| [b.x_min, b.x_max]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut total = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::with_capacity(boxes.len());
    for slab in xs.windows(2) {
        let (left, right) = (slab[0], slab[1]);
        spans.clear();
        spans.extend(
            boxes
                .iter()
                .filter(|b| b.x_min <= left && b.x_max >= right)
                .map(|b| (b.y_min, b.y_max)),
        );
        if spans.is_empty() {
            continue;
        }
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut covered = 0.0;
        let (mut lo, mut hi) = spans[0];
        for &(s, e) in &spans[1..] {
            if s > hi {
                covered += hi - lo;
                lo = s;
                hi = e;
            } else if e > hi {
                hi = e;
            }
        }
        covered += hi - lo;
        total += covered * (right - left);
    }
    total
}

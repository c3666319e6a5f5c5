//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! Boxes are half-open pixel intervals with the origin at the top-left
//! corner, so `area = (xmax - xmin) * (ymax - ymin)` with no `+1` terms.

use serde::{Deserialize, Serialize};

use crate::error::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub xmin: f64,
    pub ymin: f64,
    pub xmax: f64,
    pub ymax: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite, negative or empty extents.
    pub fn new(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Result<Self, DataError> {
        let b = BBox { xmin, ymin, xmax, ymax };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(DataError::InvalidBox { xmin, ymin, xmax, ymax })
        }
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self, DataError> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn is_valid(&self) -> bool {
        let coords = [self.xmin, self.ymin, self.xmax, self.ymax];
        coords.iter().all(|c| c.is_finite() && *c >= 0.0)
            && self.xmin < self.xmax
            && self.ymin < self.ymax
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.xmax - self.xmin
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.ymax - self.ymin
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.xmax.min(other.xmax) - self.xmin.max(other.xmin);
        let h = self.ymax.min(other.ymax) - self.ymin.max(other.ymin);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union. Symmetric, 0 for disjoint boxes, 1 for equal ones.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` when nothing is left.
    pub fn clip(&self, width: f64, height: f64) -> Option<BBox> {
        let b = BBox {
            xmin: self.xmin.clamp(0.0, width),
            ymin: self.ymin.clamp(0.0, height),
            xmax: self.xmax.clamp(0.0, width),
            ymax: self.ymax.clamp(0.0, height),
        };
        b.is_valid().then_some(b)
    }

    pub fn within(&self, width: f64, height: f64) -> bool {
        self.xmax <= width && self.ymax <= height && self.xmin >= 0.0 && self.ymin >= 0.0
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

//! Axis-aligned box algebra.
//!
//! Boxes are stored top-left anchored as `(x, y, w, h)` in continuous pixel
//! coordinates, the same layout used by COCO files.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

impl BBox {
    /// Rejects non-finite values, negative origins and non-positive sizes.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite box [{x}, {y}, {w}, {h}]")));
        }
        if x < 0.0 || y < 0.0 {
            return Err(Error::InvalidBox(format!("negative origin [{x}, {y}, {w}, {h}]")));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!("degenerate box [{x}, {y}, {w}, {h}]")));
        }
        Ok(Self { x, y, w, h })
    }

    /// Builds a box from corner coordinates `x1 < x2`, `y1 < y2`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new(x1, y1, x2 - x1, y2 - y1)
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Shifts the box by `(dx, dy)`; fails if the result leaves the positive quadrant.
    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x + dx, self.y + dy, self.w, self.h)
    }

    pub fn scale(&self, sx: f64, sy: f64) -> Result<Self> {
        Self::new(self.x * sx, self.y * sy, self.w * sx, self.h * sy)
    }

    /// Overlap with `other` as a box, or `None` when the overlap has no area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x.max(other.x);
        let y1 = self.y.max(other.y);
        let x2 = self.x2().min(other.x2());
        let y2 = self.y2().min(other.y2());
        if x2 > x1 && y2 > y1 {
            Some(BBox {
                x: x1,
                y: y1,
                w: x2 - x1,
                h: y2 - y1,
            })
        } else {
            None
        }
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &BBox) -> bool {
        other.x >= self.x && other.y >= self.y && other.x2() <= self.x2() && other.y2() <= self.y2()
    }

    /// Total order on coordinates, used as a reproducible tie-break.
    pub fn lexical_cmp(&self, other: &BBox) -> std::cmp::Ordering {
        self.x
            .total_cmp(&other.x)
            .then(self.y.total_cmp(&other.y))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let [x, y, w, h] = <[f64; 4]>::deserialize(deserializer)?;
        BBox::new(x, y, w, h).map_err(serde::de::Error::custom)
    }
}

/// Length of the overlap of `[a0, a0 + alen)` and `[b0, b0 + blen)`. When one
/// interval contains the other its stored length is returned unchanged, so a
/// contained box reports exactly its own area.
fn overlap_1d(a0: f64, alen: f64, b0: f64, blen: f64) -> f64 {
    let (a1, b1) = (a0 + alen, b0 + blen);
    if a0 >= b0 && a1 <= b1 {
        alen
    } else if b0 >= a0 && b1 <= a1 {
        blen
    } else {
        (a1.min(b1) - a0.max(b0)).max(0.0)
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    overlap_1d(a.x, a.w, b.x, b.w) * overlap_1d(a.y, a.h, b.y, b.h)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest box containing both arguments.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    let x1 = a.x.min(b.x);
    let y1 = a.y.min(b.y);
    BBox {
        x: x1,
        y: y1,
        w: a.x2().max(b.x2()) - x1,
        h: a.y2().max(b.y2()) - y1,
    }
}

//! Bounding-box algebra: center-form boxes, IoU, and generalized IoU.
//!
//! Boxes are normalized center/extent quadruples and are deliberately not
//! clipped to [0, 1] here; clipping is a rendering/export concern and the
//! loss needs unclipped coordinates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("generalized IoU is undefined when both boxes have zero area")]
    BothDegenerate,
}

/// Axis-aligned box in normalized image coordinates: center plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "extent must be non-negative");
        BBox { cx, cy, w, h }
    }

    /// Corner form (x1, y1, x2, y2) with x1 <= x2 and y1 <= y2.
    pub fn to_corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_finite(&self) -> bool {
        self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

/// Intersection over union in [0, 1]. Zero-area operands give 0 by
/// convention so near-degenerate padded boxes cannot poison cost matrices.
///
/// Areas come from the same corner-form arithmetic as the intersection so
/// identical boxes give exactly 1.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ia = intersection_area(a, b);
    if ia <= 0.0 {
        return 0.0;
    }
    let union = corner_area(a) + corner_area(b) - ia;
    if union <= 0.0 {
        return 0.0;
    }
    ia / union
}

/// Generalized IoU in (-1, 1]: IoU minus the enclosing-hull slack.
/// Errors when both boxes have zero area (undefined).
pub fn giou(a: &BBox, b: &BBox) -> Result<f64, GeomError> {
    if a.area() <= 0.0 && b.area() <= 0.0 {
        return Err(GeomError::BothDegenerate);
    }
    let ia = intersection_area(a, b);
    let union = corner_area(a) + corner_area(b) - ia;
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let hull_w = ax2.max(bx2) - ax1.min(bx1);
    let hull_h = ay2.max(by2) - ay1.min(by1);
    let hull = hull_w * hull_h;
    let iou = if union > 0.0 { ia / union } else { 0.0 };
    Ok(iou - (hull - union) / hull)
}

fn corner_area(b: &BBox) -> f64 {
    let (x1, y1, x2, y2) = b.to_corners();
    (x2 - x1) * (y2 - y1)
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.to_corners();
    let (bx1, by1, bx2, by2) = b.to_corners();
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    w * h
}

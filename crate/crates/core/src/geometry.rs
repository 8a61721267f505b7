//! Axis-aligned boxes in normalized center format, plus IoU and generalized IoU.
//!
//! Every box in the crate (prompt boxes, ground truth, decoder outputs) is a
//! [`Box`] whose coordinates are fractions of the image side. The corner form
//! is only ever a derived view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum width/height accepted by [`Box::new`].
pub const MIN_SIDE: f64 = 1e-6;

/// Normalized center-format rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner view `(x0, y0, x1, y1)` of a [`Box`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Box {
    /// Builds a validated box. Degenerate sides are rejected, not clamped.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let finite = cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite();
        if !finite
            || !(0.0..=1.0).contains(&cx)
            || !(0.0..=1.0).contains(&cy)
            || w <= MIN_SIDE
            || h <= MIN_SIDE
            || w > 1.0
            || h > 1.0
        {
            return Err(Error::InvalidBox { cx, cy, w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    /// Box from sigmoid-bounded network outputs. Values are clamped into the
    /// valid range, which only matters when a sigmoid saturates in f32.
    pub fn from_unit(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            cx: cx.clamp(0.0, 1.0),
            cy: cy.clamp(0.0, 1.0),
            w: w.clamp(2.0 * MIN_SIDE, 1.0),
            h: h.clamp(2.0 * MIN_SIDE, 1.0),
        }
    }

    pub fn from_corners(c: CornerBox) -> Result<Self> {
        Self::new(
            0.5 * (c.x0 + c.x1),
            0.5 * (c.y0 + c.y1),
            c.x1 - c.x0,
            c.y1 - c.y0,
        )
    }

    pub fn to_corners(&self) -> CornerBox {
        CornerBox {
            x0: self.cx - 0.5 * self.w,
            y0: self.cy - 0.5 * self.h,
            x1: self.cx + 0.5 * self.w,
            y1: self.cy + 0.5 * self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// True if the point lies inside the closed rectangle.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let c = self.to_corners();
        x >= c.x0 && x <= c.x1 && y >= c.y0 && y <= c.y1
    }
}

impl CornerBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

fn overlap(a: &CornerBox, b: &CornerBox) -> (f64, f64) {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter, union)
}

pub fn to_corners(b: &Box) -> CornerBox {
    b.to_corners()
}

/// Intersection over union, 0 for disjoint boxes.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let (inter, union) = overlap(&ca, &cb);
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (hull - union) / hull` with the enclosing
/// axis-aligned hull.
pub fn giou(a: &Box, b: &Box) -> f64 {
    let (ca, cb) = (a.to_corners(), b.to_corners());
    let (inter, union) = overlap(&ca, &cb);
    let hull = (ca.x1.max(cb.x1) - ca.x0.min(cb.x0)) * (ca.y1.max(cb.y1) - ca.y0.min(cb.y0));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

//! Box representations and overlap measures.
//!
//! Mask-derived pixel boxes use inclusive spans: a component covering columns
//! `x_min..=x_max` has width `x_max - x_min + 1`, so pixel `i` occupies the
//! continuous interval `[i, i + 1)`.

use serde::{Deserialize, Serialize};

/// Center/size box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// COCO-convention box: top-left corner plus size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyWh {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner box `(x1, y1)`–`(x2, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxCxCyWh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn is_valid(&self) -> bool {
        [self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) && self.w >= 0.0 && self.h >= 0.0
    }

    /// Corners in the same (normalized) units, unclamped.
    pub fn to_xyxy(&self) -> BoxXyxy {
        BoxXyxy {
            x1: self.cx - 0.5 * self.w,
            y1: self.cy - 0.5 * self.h,
            x2: self.cx + 0.5 * self.w,
            y2: self.cy + 0.5 * self.h,
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    /// Pixel COCO box for an image of the given size, clamped to the image.
    pub fn to_pixel_xywh(&self, img_w: f64, img_h: f64) -> BoxXyWh {
        cxcywh_to_xyxy(self, img_w, img_h).to_xywh()
    }

    pub fn from_pixel_xywh(b: &BoxXyWh, img_w: f64, img_h: f64) -> Self {
        xyxy_to_cxcywh(&b.to_xyxy(), img_w, img_h)
    }
}

impl BoxXyWh {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    /// Box covering the inclusive pixel span `x_min..=x_max`, `y_min..=y_max`.
    pub fn from_inclusive_span(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x: x_min as f64,
            y: y_min as f64,
            w: (x_max - x_min + 1) as f64,
            h: (y_max - y_min + 1) as f64,
        }
    }

    pub fn to_xyxy(&self) -> BoxXyxy {
        BoxXyxy {
            x1: self.x,
            y1: self.y,
            x2: self.x + self.w,
            y2: self.y + self.h,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// True when `other` lies inside `self`.
    pub fn contains(&self, other: &BoxXyWh) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.x + other.w <= self.x + self.w
            && other.y + other.h <= self.y + self.h
    }
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_xywh(&self) -> BoxXyWh {
        BoxXyWh {
            x: self.x1,
            y: self.y1,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

/// Normalized center box to pixel corners, clamped to `[0, img_w] x [0, img_h]`.
pub fn cxcywh_to_xyxy(b: &BoxCxCyWh, img_w: f64, img_h: f64) -> BoxXyxy {
    let c = b.to_xyxy();
    let cx = |v: f64| (v * img_w).clamp(0.0, img_w);
    let cy = |v: f64| (v * img_h).clamp(0.0, img_h);
    let (x1, x2) = (cx(c.x1), cx(c.x2));
    let (y1, y2) = (cy(c.y1), cy(c.y2));
    BoxXyxy {
        x1: x1.min(x2),
        y1: y1.min(y2),
        x2: x1.max(x2),
        y2: y1.max(y2),
    }
}

/// Pixel corners to a normalized center box.
pub fn xyxy_to_cxcywh(b: &BoxXyxy, img_w: f64, img_h: f64) -> BoxCxCyWh {
    BoxCxCyWh {
        cx: 0.5 * (b.x1 + b.x2) / img_w,
        cy: 0.5 * (b.y1 + b.y2) / img_h,
        w: (b.x2 - b.x1) / img_w,
        h: (b.y2 - b.y1) / img_h,
    }
}

fn intersection(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `iou - (enclosing - union) / enclosing`.
///
/// Zero-area inputs yield finite values; an empty enclosing box gives 0.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = (a.x2.max(b.x2) - a.x1.min(b.x1)).max(0.0) * (a.y2.max(b.y2) - a.y1.min(b.y1)).max(0.0);
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    if enclosing <= 0.0 {
        iou
    } else {
        iou - (enclosing - union) / enclosing
    }
}

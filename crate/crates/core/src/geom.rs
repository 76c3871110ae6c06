//! Axis-aligned boxes and overlap measures.
//!
//! Boxes use real pixel coordinates with a half-open convention: a box
//! `(x_min, y_min, x_max, y_max)` covers `[x_min, x_max) x [y_min, y_max)`.
//! Boxes may extend past the image; raster operations clip where they use them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box of the given size centered at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
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

    /// Area of the overlap with `other` (0 when disjoint).
    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &BoundingBox) -> BoundingBox {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    /// Integer pixel window covered by the box, before any clipping.
    ///
    /// Edges round to the nearest pixel boundary; the window is never empty.
    pub fn pixel_window(&self) -> PixelWindow {
        let x0 = self.x_min.round() as i64;
        let y0 = self.y_min.round() as i64;
        let x1 = (self.x_max.round() as i64).max(x0 + 1);
        let y1 = (self.y_max.round() as i64).max(y0 + 1);
        PixelWindow { x0, y0, x1, y1 }
    }

    /// Applies `p -> (p - origin) * factor` to both corners.
    pub fn affine(&self, origin: (f64, f64), factor: f64) -> Result<BoundingBox> {
        BoundingBox::new(
            (self.x_min - origin.0) * factor,
            (self.y_min - origin.1) * factor,
            (self.x_max - origin.0) * factor,
            (self.y_max - origin.1) * factor,
        )
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.to_array()
    }
}

/// Half-open integer rectangle `[x0, x1) x [y0, y1)`; may lie partly off-image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelWindow {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl PixelWindow {
    pub fn width(&self) -> usize {
        (self.x1 - self.x0) as usize
    }

    pub fn height(&self) -> usize {
        (self.y1 - self.y0) as usize
    }

    /// Intersection with `[0, width) x [0, height)`, or `None` when empty.
    pub fn clip(&self, width: usize, height: usize) -> Option<PixelWindow> {
        let x0 = self.x0.max(0);
        let y0 = self.y0.max(0);
        let x1 = self.x1.min(width as i64);
        let y1 = self.y1.min(height as i64);
        (x0 < x1 && y0 < y1).then_some(PixelWindow { x0, y0, x1, y1 })
    }

    pub fn to_box(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.x0 as f64,
            y_min: self.y0 as f64,
            x_max: self.x1 as f64,
            y_max: self.y1 as f64,
        }
    }
}

/// Intersection over union.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Distance-IoU: IoU minus squared center distance over squared diagonal of
/// the enclosing box.
pub fn diou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let rho2 = (ax - bx).powi(2) + (ay - by).powi(2);
    let enc = a.enclosing(b);
    let c2 = enc.width().powi(2) + enc.height().powi(2);
    iou(a, b) - rho2 / c2
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bb(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn iou_examples() {
        let b = bb(3.0, 4.0, 20.0, 9.5);
        assert_eq!(iou(&b, &b), 1.0);
        assert_eq!(iou(&bb(0.0, 0.0, 1.0, 1.0), &bb(2.0, 2.0, 3.0, 3.0)), 0.0);
        let v = iou(&bb(0.0, 0.0, 10.0, 10.0), &bb(5.0, 0.0, 15.0, 10.0));
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn diou_examples() {
        let b = bb(3.0, 4.0, 20.0, 9.5);
        assert_eq!(diou(&b, &b), 1.0);
        let outer = bb(0.0, 0.0, 10.0, 10.0);
        let inner = bb(2.0, 2.0, 8.0, 8.0);
        assert_eq!(diou(&outer, &inner), iou(&outer, &inner));
        let v = diou(&bb(0.0, 0.0, 10.0, 10.0), &bb(10.0, 0.0, 20.0, 10.0));
        assert!((v + 0.2).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoundingBox::new(1.0, 0.0, 1.0, 5.0).is_err());
        assert!(BoundingBox::new(0.0, 5.0, 1.0, 4.0).is_err());
        assert!(BoundingBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn window_clip() {
        let w = bb(-10.0, -10.0, 40.0, 40.0).pixel_window();
        assert_eq!(w.clip(200, 200), Some(PixelWindow { x0: 0, y0: 0, x1: 40, y1: 40 }));
        assert_eq!(bb(250.0, 0.0, 260.0, 5.0).pixel_window().clip(200, 200), None);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64)
            .prop_map(|(x, y, w, h)| bb(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&b, &a));
        }

        #[test]
        fn diou_never_exceeds_iou(a in arb_box(), b in arb_box()) {
            let d = diou(&a, &b);
            let i = iou(&a, &b);
            prop_assert!(d <= i);
            if a.center() == b.center() {
                prop_assert_eq!(d, i);
            } else {
                prop_assert!(d < i);
            }
        }
    }
}

//! The ten-class 2D shape catalog.
//!
//! Each class is a silhouette in normalized coordinates `(a, b)` in
//! `[-1, 1]^2`, stretched to a footprint of half-width `scale * hw(theta)`
//! and half-height `scale * hh`. `theta` is a spin about the vertical axis:
//! it changes the apparent width of non-symmetric solids and leaves the
//! four solids of revolution (classes 1, 3, 7, 8) untouched.

use crate::detection::ClassLabel;

pub const NUM_CLASSES: u32 = 10;

/// Lowest shading factor of any class; keeps rendered object pixels well
/// above the default occlusion threshold.
pub const SHADE_FLOOR: f64 = 0.55;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Disk,
    Ellipse,
    Annulus,
    Square,
    WideThinRect,
    TallThinRect,
    MediumRect,
    TallNarrowRect,
    WideNarrowRect,
    Triangle,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 10] = [
        ShapeClass::Disk,
        ShapeClass::Ellipse,
        ShapeClass::Annulus,
        ShapeClass::Square,
        ShapeClass::WideThinRect,
        ShapeClass::TallThinRect,
        ShapeClass::MediumRect,
        ShapeClass::TallNarrowRect,
        ShapeClass::WideNarrowRect,
        ShapeClass::Triangle,
    ];

    pub fn from_label(cls: ClassLabel) -> Option<Self> {
        (1..=NUM_CLASSES)
            .contains(&cls)
            .then(|| Self::ALL[cls as usize - 1])
    }

    pub fn label(self) -> ClassLabel {
        Self::ALL.iter().position(|&c| c == self).unwrap() as ClassLabel + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Disk => "disk",
            ShapeClass::Ellipse => "ellipse",
            ShapeClass::Annulus => "annulus",
            ShapeClass::Square => "square",
            ShapeClass::WideThinRect => "wide thin rectangle",
            ShapeClass::TallThinRect => "tall thin rectangle",
            ShapeClass::MediumRect => "medium rectangle",
            ShapeClass::TallNarrowRect => "tall narrow rectangle",
            ShapeClass::WideNarrowRect => "wide narrow rectangle",
            ShapeClass::Triangle => "triangle",
        }
    }

    /// Whether the silhouette ignores spin.
    pub fn rotation_invariant(self) -> bool {
        matches!(
            self,
            ShapeClass::Disk | ShapeClass::Annulus | ShapeClass::MediumRect | ShapeClass::TallNarrowRect
        )
    }

    /// Normalized half extents `(hw, hh)` at spin `degrees`.
    pub fn half_extents(self, degrees: f64) -> (f64, f64) {
        let r = degrees.to_radians();
        let (c, s) = (r.cos().abs(), r.sin().abs());
        match self {
            ShapeClass::Disk | ShapeClass::Annulus => (1.0, 1.0),
            ShapeClass::Ellipse => ((c * c + 0.5625 * s * s).sqrt(), 0.55),
            ShapeClass::Square => (0.8 * (c + s), 0.8),
            ShapeClass::WideThinRect => (c + 0.8 * s, 0.28),
            ShapeClass::TallThinRect => (0.3 * c + 0.25 * s, 1.0),
            ShapeClass::MediumRect => (0.7, 1.0),
            ShapeClass::TallNarrowRect => (0.45, 1.0),
            ShapeClass::WideNarrowRect => (c + 0.9 * s, 0.5),
            ShapeClass::Triangle => (0.8 * (c + 0.6 * s), 1.0),
        }
    }

    /// Shading factor at normalized `(a, b)`, or `None` outside the shape.
    pub fn shade(self, a: f64, b: f64) -> Option<f64> {
        let r2 = a * a + b * b;
        let box_in = a.abs() <= 1.0 && b.abs() <= 1.0;
        let radial = |r2: f64| 1.0 - (1.0 - SHADE_FLOOR) * r2.min(1.0);
        match self {
            ShapeClass::Disk | ShapeClass::Ellipse => (r2 <= 1.0).then(|| radial(r2)),
            ShapeClass::Annulus => {
                const INNER2: f64 = 0.3;
                (INNER2..=1.0).contains(&r2).then(|| {
                    let mid = (1.0 + INNER2.sqrt()) / 2.0;
                    let half = (1.0 - INNER2.sqrt()) / 2.0;
                    radial(((r2.sqrt() - mid) / half).powi(2))
                })
            }
            ShapeClass::Square | ShapeClass::WideThinRect | ShapeClass::TallThinRect => {
                box_in.then(|| radial(a.abs().max(b.abs()).powi(2)))
            }
            ShapeClass::MediumRect | ShapeClass::TallNarrowRect => box_in.then(|| radial(a * a)),
            ShapeClass::WideNarrowRect => box_in.then(|| radial(b * b)),
            ShapeClass::Triangle => {
                (b.abs() <= 1.0 && a.abs() <= (b + 1.0) / 2.0).then(|| radial(r2 / 2.0))
            }
        }
    }
}

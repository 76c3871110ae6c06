//! Boolean rasters: object supports and visible-pixel sets.

use crate::image::Image;

/// Boolean raster over a `height x width` frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

/// Pixels of a reconstruction whose magnitude exceeds the occlusion threshold.
pub type SupportMask = Mask;

/// Integer pixel coordinates relative to a frame (a box window or the image).
pub type PixelSet = Mask;

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Set pixels as `(x, y)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i % self.width, i / self.width))
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.same_frame(other) && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.same_frame(other) && self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    fn same_frame(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Tight `(x0, y0, x1, y1)` half-open bounds of the set pixels.
    pub fn bounds(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for (x, y) in self.iter() {
            out = Some(match out {
                None => (x, y, x + 1, y + 1),
                Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
            });
        }
        out
    }
}

/// Pixels whose RGB Euclidean norm strictly exceeds `t0`.
pub fn support_mask(recon: &Image, t0: f64) -> SupportMask {
    Mask::from_fn(recon.height(), recon.width(), |x, y| recon.magnitude(x, y) > t0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn black_has_empty_support() {
        let img = Image::zeros(5, 5);
        assert!(support_mask(&img, 0.0).is_empty());
    }

    #[test]
    fn norm_threshold() {
        let mut img = Image::zeros(1, 2);
        img.set_pixel(0, 0, [0.5, 0.0, 0.0]);
        img.set_pixel(1, 0, [0.0, 0.0, 1e-9]);
        let m = support_mask(&img, 0.1);
        assert!(m.get(0, 0));
        assert!(!m.get(1, 0));
        let m0 = support_mask(&img, 0.0);
        assert_eq!(m0.count(), 2);
    }

    #[test]
    fn bounds_and_iter() {
        let m = Mask::from_fn(4, 6, |x, y| (2..5).contains(&x) && y == 1);
        assert_eq!(m.bounds(), Some((2, 1, 5, 2)));
        assert_eq!(m.iter().collect::<Vec<_>>(), vec![(2, 1), (3, 1), (4, 1)]);
        assert_eq!(Mask::empty(2, 2).bounds(), None);
    }

    proptest! {
        #[test]
        fn support_antitone(vals in proptest::collection::vec(0.0..1.0f64, 48), t in 0.0..1.5f64, dt in 0.0..0.5f64) {
            let img = Image::from_raw(4, 4, vals).unwrap();
            let lo = support_mask(&img, t);
            let hi = support_mask(&img, t + dt);
            prop_assert!(hi.is_subset_of(&lo));
        }
    }
}

//! Affine sampling grid and bilinear kernel between the `L x L`
//! reconstruction frame and the `d x d` decoder output.

use crate::image::{Image, Rgb};

/// Pose of the sampling grid: scale `s = d / L`, translation `t` in
/// reconstruction pixels, optional rotation `alpha` in degrees about the
/// grid center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub s: (f64, f64),
    pub t: (f64, f64),
    pub alpha: Option<f64>,
}

/// `(x_d, y_d) = (s_x x_b + t_x s_x, s_y y_b + t_y s_y)`.
pub fn affine_map(pt: (f64, f64), t: (f64, f64), s: (f64, f64)) -> (f64, f64) {
    (s.0 * pt.0 + t.0 * s.0, s.1 * pt.1 + t.1 * s.1)
}

/// Rotates `pt` by `degrees` about `(c, c)`.
pub fn rotate_about(pt: (f64, f64), c: f64, degrees: f64) -> (f64, f64) {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (dx, dy) = (pt.0 - c, pt.1 - c);
    (c + cos * dx - sin * dy, c + sin * dx + cos * dy)
}

impl Pose {
    /// Decoder-frame coordinate of reconstruction pixel `(x_b, y_b)` in an
    /// `l x l` frame.
    pub fn map(&self, x_b: f64, y_b: f64, l: usize) -> (f64, f64) {
        let p = match self.alpha {
            Some(a) => rotate_about((x_b, y_b), (l as f64 - 1.0) / 2.0, a),
            None => (x_b, y_b),
        };
        affine_map(p, self.t, self.s)
    }
}

/// Bilinear kernel read of a channel-interleaved `d x d` raster `src`;
/// coordinates a pixel or more outside the grid contribute nothing.
#[inline]
pub(crate) fn sample_raw(src: &[f64], d: usize, x: f64, y: f64) -> Rgb {
    let mut out = [0.0; 3];
    for_taps(d, x, y, |o, w, _, _| {
        for c in 0..3 {
            out[c] += w * src[o + c];
        }
    });
    out
}

/// Calls `f(offset, weight, d weight / dx, d weight / dy)` for each in-range
/// grid node with a possibly nonzero kernel weight.
#[inline]
pub(crate) fn for_taps(d: usize, x: f64, y: f64, mut f: impl FnMut(usize, f64, f64, f64)) {
    let (xf, yf) = (x.floor(), y.floor());
    if !(xf >= -1.0 && yf >= -1.0 && xf < d as f64 && yf < d as f64) {
        return;
    }
    let (ax, ay) = (x - xf, y - yf);
    let (m0, n0) = (xf as i64, yf as i64);
    let xs = [(m0, 1.0 - ax, -1.0), (m0 + 1, ax, 1.0)];
    let ys = [(n0, 1.0 - ay, -1.0), (n0 + 1, ay, 1.0)];
    for &(n, wy, dwy) in &ys {
        if n < 0 || n >= d as i64 {
            continue;
        }
        for &(m, wx, dwx) in &xs {
            if m < 0 || m >= d as i64 {
                continue;
            }
            f((n as usize * d + m as usize) * 3, wx * wy, dwx * wy, wx * dwy);
        }
    }
}

/// `sum_{m,n} src(m, n, c) max(0, 1 - |x - m|) max(0, 1 - |y - n|)` per
/// channel, with `m` the column and `n` the row.
pub fn bilinear_sample(src: &Image, x: f64, y: f64) -> Rgb {
    assert_eq!(src.height(), src.width(), "sampling source must be square");
    sample_raw(src.as_slice(), src.width(), x, y)
}

/// Resamples a square `d x d` image onto an `l x l` grid through `pose`.
pub fn warp_image(src: &Image, pose: &Pose, l: usize) -> Image {
    assert_eq!(src.height(), src.width(), "sampling source must be square");
    let d = src.width();
    let mut out = Image::zeros(l, l);
    for yb in 0..l {
        for xb in 0..l {
            let (x, y) = pose.map(xb as f64, yb as f64, l);
            out.set_pixel(xb, yb, sample_raw(src.as_slice(), d, x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, d: usize) -> Image {
        Image::from_raw(d, d, (0..d * d * 3).map(|_| rng.random()).collect()).unwrap()
    }

    /// Direct double sum over every grid node.
    fn kernel_sum(src: &Image, x: f64, y: f64) -> Rgb {
        let mut out = [0.0; 3];
        for n in 0..src.height() {
            for m in 0..src.width() {
                let w = (1.0 - (x - m as f64).abs()).max(0.0) * (1.0 - (y - n as f64).abs()).max(0.0);
                let p = src.pixel(m, n);
                for c in 0..3 {
                    out[c] += p[c] * w;
                }
            }
        }
        out
    }

    #[test]
    fn affine_examples() {
        assert_eq!(affine_map((10.0, 6.0), (0.0, 0.0), (1.0, 1.0)), (10.0, 6.0));
        assert_eq!(affine_map((10.0, 6.0), (0.0, 0.0), (0.5, 0.5)), (5.0, 3.0));
        assert_eq!(affine_map((10.0, 6.0), (2.0, 0.0), (0.5, 0.5)), (6.0, 3.0));
    }

    #[test]
    fn kernel_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = rng.random_range(1..12);
            let img = random_image(&mut rng, d);
            let (x, y) = (rng.random_range(-3.0..d as f64 + 2.0), rng.random_range(-3.0..d as f64 + 2.0));
            let a = bilinear_sample(&img, x, y);
            let b = kernel_sum(&img, x, y);
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-12, "{x} {y}");
            }
        }
    }

    #[test]
    fn integer_and_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 6);
        for y in 0..6 {
            for x in 0..6 {
                assert_eq!(bilinear_sample(&img, x as f64, y as f64), img.pixel(x, y));
            }
        }
        assert_eq!(bilinear_sample(&img, -5.0, -5.0), [0.0; 3]);
        assert_eq!(bilinear_sample(&img, 7.0, 2.0), [0.0; 3]);
        let mid = bilinear_sample(&img, 2.5, 3.0);
        for c in 0..3 {
            assert!((mid[c] - (img.pixel(2, 3)[c] + img.pixel(3, 3)[c]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn unit_scale_warp_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 9);
        let pose = Pose {
            s: (1.0, 1.0),
            t: (0.0, 0.0),
            alpha: None,
        };
        assert_eq!(warp_image(&img, &pose, 9), img);
        let turned = Pose {
            alpha: Some(0.0),
            ..pose
        };
        assert_eq!(warp_image(&img, &turned, 9), img);
    }

    #[test]
    fn quarter_turn_about_center() {
        let (x, y) = rotate_about((4.0, 2.0), 2.0, 90.0);
        assert!((x - 2.0).abs() < 1e-12 && (y - 4.0).abs() < 1e-12);
    }
}

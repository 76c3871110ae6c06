//! Dense RGB rasters with intensities in `[0, 1]`.
//!
//! Two on-disk encodings: 8-bit PNG for looking at, and the `IMGF` float32
//! container for lossless round trips. `IMGF` layout (little-endian):
//! magic `b"IMGF"`, `u32` height, `u32` width, then `height * width * 3`
//! `f32` values, row-major, channel-interleaved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::BoundingBox;

pub type Rgb = [f64; 3];

pub const IMGF_MAGIC: &[u8; 4] = b"IMGF";

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// All-black image.
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, value: Rgb) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| value).collect();
        Self::from_raw(height, width, data)
    }

    /// Builds an image from channel-interleaved row-major data.
    pub fn from_raw(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidImage(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of scalar entries (`height * width * 3`).
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        (y * self.width + x) * 3
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> Rgb {
        let o = self.offset(x, y);
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Writes a pixel, clamping each channel into `[0, 1]`.
    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, value: Rgb) {
        let o = self.offset(x, y);
        for c in 0..3 {
            self.data[o + c] = value[c].clamp(0.0, 1.0);
        }
    }

    #[inline]
    pub fn is_blank(&self, x: usize, y: usize) -> bool {
        self.pixel(x, y) == [0.0, 0.0, 0.0]
    }

    /// Euclidean norm of the RGB triple at `(x, y)`.
    #[inline]
    pub fn magnitude(&self, x: usize, y: usize) -> f64 {
        let [r, g, b] = self.pixel(x, y);
        (r * r + g * g + b * b).sqrt()
    }

    /// Sum of squared differences over every channel.
    pub fn squared_distance(&self, other: &Image) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Rounds every value to the nearest `f32`, making the image exactly
    /// representable in the `IMGF` container.
    pub fn quantize_f32(mut self) -> Self {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
        self
    }

    /// Bilinear resample of the square window `[x0, x0+side) x [y0, y0+side)`
    /// onto a `height x width` raster (pixel-center aligned).
    pub fn resample_window(&self, x0: f64, y0: f64, side: f64, height: usize, width: usize) -> Image {
        let fx = side / width as f64;
        let fy = side / height as f64;
        let mut out = Image::zeros(height, width);
        for y in 0..height {
            let sy = y0 + (y as f64 + 0.5) * fy - 0.5;
            for x in 0..width {
                let sx = x0 + (x as f64 + 0.5) * fx - 0.5;
                out.set_pixel(x, y, self.sample_bilinear_clamped(sx, sy));
            }
        }
        out
    }

    /// Bilinear read with edge clamping (used for resampling whole images).
    fn sample_bilinear_clamped(&self, x: f64, y: f64) -> Rgb {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let xf = x.floor();
        let yf = y.floor();
        let (ax, ay) = (x - xf, y - yf);
        let (x0, y0) = (xf as usize, yf as usize);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0; 3];
        for c in 0..3 {
            out[c] = (1.0 - ay) * ((1.0 - ax) * p00[c] + ax * p10[c])
                + ay * ((1.0 - ax) * p01[c] + ax * p11[c]);
        }
        out
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        write_rgb8_png(path, self.width, self.height, &bytes)
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let (width, height, bytes) = read_rgb8_png(path)?;
        let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
        Image::from_raw(height, width, data)
    }

    pub fn write_imgf(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.encode_imgf(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn encode_imgf(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(IMGF_MAGIC)?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_imgf(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Image::decode_imgf(&bytes)
    }

    pub fn decode_imgf(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 12 || &bytes[..4] != IMGF_MAGIC {
            return Err(Error::BadRaster("missing IMGF magic".into()));
        }
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let n = height * width * 3;
        if bytes.len() != 12 + 4 * n {
            return Err(Error::BadRaster(format!(
                "payload is {} bytes, header implies {}",
                bytes.len() - 12,
                4 * n
            )));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Image::from_raw(height, width, data)
    }
}

/// Sub-raster over the integer pixels of `bbox` intersected with the image.
pub fn crop(image: &Image, bbox: &BoundingBox) -> Result<Image> {
    let win = bbox
        .pixel_window()
        .clip(image.width(), image.height())
        .ok_or(Error::BoxOutsideImage)?;
    let (w, h) = (win.width(), win.height());
    let mut data = Vec::with_capacity(w * h * 3);
    for y in win.y0 as usize..win.y1 as usize {
        let start = (y * image.width() + win.x0 as usize) * 3;
        data.extend_from_slice(&image.as_slice()[start..start + w * 3]);
    }
    Ok(Image {
        height: h,
        width: w,
        data,
    })
}

pub(crate) fn write_rgb8_png(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))
}

pub(crate) fn read_rgb8_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(format!("{}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!("{}: expected 8-bit RGB", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient(h: usize, w: usize) -> Image {
        let data = (0..h * w * 3).map(|i| (i % 97) as f64 / 96.0).collect();
        Image::from_raw(h, w, data).unwrap()
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(Image::from_raw(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::from_raw(1, 1, vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn crop_full_is_identity() {
        let img = gradient(12, 9);
        let full = BoundingBox::new(0.0, 0.0, 9.0, 12.0).unwrap();
        assert_eq!(crop(&img, &full).unwrap(), img);
    }

    #[test]
    fn crop_constant_field() {
        let img = Image::filled(30, 30, [0.5; 3]).unwrap();
        let b = BoundingBox::new(4.0, 7.0, 14.0, 27.0).unwrap();
        let c = crop(&img, &b).unwrap();
        assert_eq!((c.height(), c.width()), (20, 10));
        assert!(c.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn crop_clips_to_image() {
        let img = gradient(200, 200);
        let b = BoundingBox::new(-10.0, -10.0, 40.0, 40.0).unwrap();
        let c = crop(&img, &b).unwrap();
        assert_eq!((c.height(), c.width()), (40, 40));
        assert_eq!(c.pixel(0, 0), img.pixel(0, 0));
        assert_eq!(c.pixel(39, 39), img.pixel(39, 39));
        let again = crop(&c, &BoundingBox::new(0.0, 0.0, 40.0, 40.0).unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn crop_outside_errors() {
        let img = gradient(10, 10);
        let b = BoundingBox::new(20.0, 20.0, 30.0, 30.0).unwrap();
        assert!(matches!(crop(&img, &b), Err(Error::BoxOutsideImage)));
    }

    #[test]
    fn imgf_round_trip() {
        let img = gradient(7, 5).quantize_f32();
        let mut buf = Vec::new();
        img.encode_imgf(&mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 7 * 5 * 3 * 4);
        assert_eq!(Image::decode_imgf(&buf).unwrap(), img);
        buf[0] = b'X';
        assert!(Image::decode_imgf(&buf).is_err());
    }

    #[test]
    fn png_round_trip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = gradient(6, 4);
        img.write_png(&path).unwrap();
        let back = Image::read_png(&path).unwrap();
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn resample_full_window_is_identity() {
        let img = gradient(20, 20);
        assert_eq!(img.resample_window(0.0, 0.0, 20.0, 20, 20), img);
    }
}

//! 8-bit RGB crop images and the small set of geometric and photometric
//! primitives the preprocessing and augmentation stages need.

use crate::error::{Error, Result};
use image::{ImageBuffer, RgbImage};
use std::path::Path;

/// Square 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl CropImage {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Self {
        assert_eq!(rgb.len(), width * height * 3);
        Self { width, height, rgb }
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self::new(width, height, vec![value; width * height * 3])
    }

    /// Quantizes unit-range floats (values are clamped) into 8-bit channels.
    pub fn from_unit_f64(width: usize, height: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), width * height * 3);
        let rgb = data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(width, height, rgb)
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, p: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&p);
    }

    /// Bilinear sample with border clamp, per channel.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let clamp_x = |v: i64| v.clamp(0, self.width as i64 - 1) as usize;
        let clamp_y = |v: i64| v.clamp(0, self.height as i64 - 1) as usize;
        let x0 = x.floor() as i64;
        let y0 = y.floor() as i64;
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let (x0c, x1c) = (clamp_x(x0), clamp_x(x0 + 1));
        let (y0c, y1c) = (clamp_y(y0), clamp_y(y0 + 1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let p00 = f64::from(self.pixel(x0c, y0c)[c]);
            let p10 = f64::from(self.pixel(x1c, y0c)[c]);
            let p01 = f64::from(self.pixel(x0c, y1c)[c]);
            let p11 = f64::from(self.pixel(x1c, y1c)[c]);
            out[c] = p00 * (1.0 - fx) * (1.0 - fy)
                + p10 * fx * (1.0 - fy)
                + p01 * (1.0 - fx) * fy
                + p11 * fx * fy;
        }
        out
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.rgb.clone())
            .expect("buffer length matches dimensions")
    }

    pub fn from_rgb_image(img: &RgbImage) -> Self {
        Self::new(img.width() as usize, img.height() as usize, img.as_raw().clone())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.to_rgb_image()
            .save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(Error::Image)?
            .to_rgb8();
        Ok(Self::from_rgb_image(&img))
    }
}

/// Direct 2D similarity transform `p -> s * R(angle) * p + t`, stored as
/// `[a, -b; b, a]` with translation, so composition and inversion stay exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Self { a: 1.0, b: 0.0, tx: 0.0, ty: 0.0 }
    }

    pub fn from_parts(scale: f64, angle: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle.cos(),
            b: scale * angle.sin(),
            tx,
            ty,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    pub fn inverse(&self) -> Self {
        let det = self.a * self.a + self.b * self.b;
        let ia = self.a / det;
        let ib = -self.b / det;
        Self {
            a: ia,
            b: ib,
            tx: -(ia * self.tx - ib * self.ty),
            ty: -(ib * self.tx + ia * self.ty),
        }
    }
}

/// Least-squares similarity mapping `src[i] -> dst[i]`.
pub fn estimate_similarity(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Similarity {
    assert!(src.len() >= 2 && src.len() == dst.len());
    let n = src.len() as f64;
    let (mut sx, mut sy, mut dx, mut dy) = (0.0, 0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        sx += p[0];
        sy += p[1];
        dx += q[0];
        dy += q[1];
    }
    let (sx, sy, dx, dy) = (sx / n, sy / n, dx / n, dy / n);
    let mut num_a = 0.0;
    let mut num_b = 0.0;
    let mut denom = 0.0;
    for (p, q) in src.iter().zip(dst) {
        let (px, py) = (p[0] - sx, p[1] - sy);
        let (qx, qy) = (q[0] - dx, q[1] - dy);
        num_a += px * qx + py * qy;
        num_b += px * qy - py * qx;
        denom += px * px + py * py;
    }
    let a = num_a / denom;
    let b = num_b / denom;
    Similarity {
        a,
        b,
        tx: dx - (a * sx - b * sy),
        ty: dy - (b * sx + a * sy),
    }
}

/// Resamples `source` through `to_source` (a map from output coordinates to
/// source coordinates) into a `size x size` crop.
pub fn resample(source: &CropImage, to_source: impl Fn(f64, f64) -> (f64, f64), size: usize) -> CropImage {
    let mut out = CropImage::filled(size, size, 0);
    for y in 0..size {
        for x in 0..size {
            let (sx, sy) = to_source(x as f64, y as f64);
            let v = source.sample(sx, sy);
            out.set_pixel(x, y, [
                v[0].round().clamp(0.0, 255.0) as u8,
                v[1].round().clamp(0.0, 255.0) as u8,
                v[2].round().clamp(0.0, 255.0) as u8,
            ]);
        }
    }
    out
}

/// Resizes with bilinear sampling.
pub fn resize(source: &CropImage, size: usize) -> CropImage {
    let sx = source.width as f64 / size as f64;
    let sy = source.height as f64 / size as f64;
    resample(source, |x, y| ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5), size)
}

pub fn flip_horizontal(img: &CropImage) -> CropImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(x, y, img.pixel(img.width - 1 - x, y));
        }
    }
    out
}

pub fn gaussian_blur(img: &CropImage, sigma: f64) -> CropImage {
    let blurred = image::imageops::blur(&img.to_rgb_image(), sigma as f32);
    CropImage::from_rgb_image(&blurred)
}

/// Encode to JPEG at the given quality, decode back. Used as an augmentation.
pub fn jpeg_roundtrip(img: &CropImage, quality: u8) -> Result<CropImage> {
    let mut bytes = Vec::new();
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, quality);
    img.to_rgb_image()
        .write_with_encoder(encoder)
        .map_err(Error::Image)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)?
        .to_rgb8();
    Ok(CropImage::from_rgb_image(&decoded))
}

/// Scales brightness/contrast/saturation by the given factors.
pub fn color_jitter(img: &CropImage, brightness: f64, contrast: f64, saturation: f64) -> CropImage {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            let mut v = [f64::from(p[0]), f64::from(p[1]), f64::from(p[2])];
            let gray = 0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2];
            for c in &mut v {
                *c = gray + (*c - gray) * saturation;
                *c = 128.0 + (*c - 128.0) * contrast;
                *c *= brightness;
            }
            out.set_pixel(x, y, [
                v[0].round().clamp(0.0, 255.0) as u8,
                v[1].round().clamp(0.0, 255.0) as u8,
                v[2].round().clamp(0.0, 255.0) as u8,
            ]);
        }
    }
    out
}

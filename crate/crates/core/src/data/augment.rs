//! Training-time image augmentations: horizontal flip, random affine,
//! Gaussian blur, color jitter, JPEG compression. Each applies with its
//! configured probability; the whole chain is deterministic given the RNG
//! state. Probabilities and magnitudes are exposed here because the reference
//! pipeline leaves them unspecified.

use crate::data::imageops::{self, CropImage, Similarity};
use crate::error::Result;
use rand::RngExt;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub affine_p: f64,
    pub max_rotate_deg: f64,
    pub max_translate_frac: f64,
    pub scale_range: (f64, f64),
    pub blur_p: f64,
    pub blur_sigma_range: (f64, f64),
    pub jitter_p: f64,
    pub jitter_strength: f64,
    pub jpeg_p: f64,
    pub jpeg_quality_range: (u8, u8),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            affine_p: 0.5,
            max_rotate_deg: 10.0,
            max_translate_frac: 0.05,
            scale_range: (0.95, 1.05),
            blur_p: 0.1,
            blur_sigma_range: (0.3, 2.0),
            jitter_p: 0.5,
            jitter_strength: 0.2,
            jpeg_p: 0.3,
            jpeg_quality_range: (30, 90),
        }
    }
}

impl AugmentConfig {
    /// All probabilities zero: `augment` becomes the identity.
    pub fn disabled() -> Self {
        Self {
            flip_p: 0.0,
            affine_p: 0.0,
            blur_p: 0.0,
            jitter_p: 0.0,
            jpeg_p: 0.0,
            ..Self::default()
        }
    }
}

fn uniform(rng: &mut impl RngExt, lo: f64, hi: f64) -> f64 {
    lo + rng.random::<f64>() * (hi - lo)
}

/// Applies the augmentation chain. Same-size output; identity when every
/// probability is zero.
pub fn augment(image: &CropImage, rng: &mut impl RngExt, config: &AugmentConfig) -> Result<CropImage> {
    let mut out = image.clone();

    if config.flip_p > 0.0 && rng.random::<f64>() < config.flip_p {
        out = imageops::flip_horizontal(&out);
    }

    if config.affine_p > 0.0 && rng.random::<f64>() < config.affine_p {
        let angle = uniform(rng, -config.max_rotate_deg, config.max_rotate_deg).to_radians();
        let scale = uniform(rng, config.scale_range.0, config.scale_range.1);
        let tx = uniform(rng, -config.max_translate_frac, config.max_translate_frac)
            * out.width as f64;
        let ty = uniform(rng, -config.max_translate_frac, config.max_translate_frac)
            * out.height as f64;
        let cx = (out.width as f64 - 1.0) / 2.0;
        let cy = (out.height as f64 - 1.0) / 2.0;
        // rotate/scale about the center, then translate
        let fwd = Similarity::from_parts(scale, angle, 0.0, 0.0);
        let (rcx, rcy) = fwd.apply(cx, cy);
        let fwd = Similarity { tx: cx - rcx + tx, ty: cy - rcy + ty, ..fwd };
        let inv = fwd.inverse();
        let size = out.width;
        out = imageops::resample(&out, |x, y| inv.apply(x, y), size);
    }

    if config.blur_p > 0.0 && rng.random::<f64>() < config.blur_p {
        let sigma = uniform(rng, config.blur_sigma_range.0, config.blur_sigma_range.1);
        out = imageops::gaussian_blur(&out, sigma);
    }

    if config.jitter_p > 0.0 && rng.random::<f64>() < config.jitter_p {
        let s = config.jitter_strength;
        let brightness = uniform(rng, 1.0 - s, 1.0 + s);
        let contrast = uniform(rng, 1.0 - s, 1.0 + s);
        let saturation = uniform(rng, 1.0 - s, 1.0 + s);
        out = imageops::color_jitter(&out, brightness, contrast, saturation);
    }

    if config.jpeg_p > 0.0 && rng.random::<f64>() < config.jpeg_p {
        let (lo, hi) = config.jpeg_quality_range;
        let quality = rng.random_range(lo..=hi);
        out = imageops::jpeg_roundtrip(&out, quality)?;
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn textured(size: usize) -> CropImage {
        let mut img = CropImage::filled(size, size, 80);
        for y in 0..size {
            for x in 0..size {
                if (x + 2 * y) % 5 == 0 {
                    img.set_pixel(x, y, [200, (x * 3 % 255) as u8, (y * 7 % 255) as u8]);
                }
            }
        }
        img
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let img = textured(32);
        let mut rng = stream(0, "augment", &[0]);
        let out = augment(&img, &mut rng, &AugmentConfig::disabled()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn flip_probability_one_mirrors() {
        let mut img = CropImage::filled(8, 8, 0);
        img.set_pixel(0, 3, [255, 1, 2]);
        let config = AugmentConfig {
            flip_p: 1.0,
            ..AugmentConfig::disabled()
        };
        let mut rng = stream(1, "augment", &[0]);
        let out = augment(&img, &mut rng, &config).unwrap();
        assert_eq!(out.pixel(7, 3), [255, 1, 2]);
        assert_eq!(out.pixel(0, 3), [0, 0, 0]);
    }

    #[test]
    fn same_rng_state_reproduces_bytes() {
        let img = textured(48);
        let config = AugmentConfig::default();
        let run = || {
            let mut rng = stream(7, "augment", &[3]);
            augment(&img, &mut rng, &config).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn jpeg_pass_is_reproducible_and_changes_bytes() {
        let img = textured(48);
        let config = AugmentConfig {
            jpeg_p: 1.0,
            jpeg_quality_range: (30, 90),
            ..AugmentConfig::disabled()
        };
        let run = |seed: u64| {
            let mut rng = stream(seed, "augment", &[]);
            augment(&img, &mut rng, &config).unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), img, "compression leaves artifacts");
    }

    #[test]
    fn output_shape_is_preserved() {
        let img = textured(32);
        let config = AugmentConfig {
            flip_p: 1.0,
            affine_p: 1.0,
            blur_p: 1.0,
            jitter_p: 1.0,
            jpeg_p: 1.0,
            ..AugmentConfig::default()
        };
        let mut rng = stream(9, "augment", &[]);
        let out = augment(&img, &mut rng, &config).unwrap();
        assert_eq!((out.width, out.height), (32, 32));
    }
}

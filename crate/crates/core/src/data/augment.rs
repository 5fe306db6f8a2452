//! Image preprocessing: resize, crop, color jitter, flip, and normalization.

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Smallest accepted side length of an input image.
pub const MIN_SIDE: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    /// Images are first resized to `resize_to × resize_to`.
    pub resize_to: usize,
    /// Side of the square crop fed to the backbone.
    pub crop_to: usize,
    /// Random crop in training mode; center crop otherwise.
    pub random_crop: bool,
    /// Brightness, contrast, and saturation jitter magnitudes.
    pub color_jitter: [f32; 3],
    pub horizontal_flip_prob: f32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            resize_to: 92,
            crop_to: 84,
            random_crop: true,
            color_jitter: [0.4, 0.4, 0.4],
            horizontal_flip_prob: 0.5,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl AugmentationPolicy {
    /// Same geometry and normalization with every random transform disabled.
    pub fn without_augmentation(&self) -> Self {
        Self {
            random_crop: false,
            color_jitter: [0.0; 3],
            horizontal_flip_prob: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidPolicy(m));
        if self.crop_to == 0 || self.crop_to > self.resize_to {
            return bad(format!("crop_to {} must be in 1..={}", self.crop_to, self.resize_to));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return bad(format!("flip probability {} outside [0, 1]", self.horizontal_flip_prob));
        }
        if self.color_jitter.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return bad(format!("jitter magnitudes {:?} must be finite and non-negative", self.color_jitter));
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return bad("normalization mean must be finite and std positive".into());
        }
        Ok(())
    }
}

/// Uniform top-left offset `(x, y)` of a `crop`-sized window inside a `size` square.
pub fn sample_crop_offset<R: Rng + ?Sized>(size: usize, crop: usize, rng: &mut R) -> (usize, usize) {
    let slack = size - crop;
    (rng.gen_range(0..=slack), rng.gen_range(0..=slack))
}

/// Turns an RGB image into a normalized `3 × crop_to × crop_to` tensor.
///
/// Training mode: resize → random crop → brightness/contrast/saturation jitter →
/// random horizontal flip → normalize. Evaluation mode: resize → center crop → normalize.
pub fn preprocess<R: Rng + ?Sized>(image: &RgbImage, policy: &AugmentationPolicy, train_mode: bool, rng: &mut R) -> Result<Tensor<f32>> {
    let (w, h) = image.dimensions();
    if w < MIN_SIDE || h < MIN_SIDE {
        return Err(Error::DegenerateImage { width: w, height: h });
    }
    policy.validate()?;
    let size = policy.resize_to;
    let resized;
    let src = if (w as usize, h as usize) == (size, size) {
        image
    } else {
        resized = imageops::resize(image, size as u32, size as u32, FilterType::Triangle);
        &resized
    };

    let crop = policy.crop_to;
    let (ox, oy) = if train_mode && policy.random_crop {
        sample_crop_offset(size, crop, rng)
    } else {
        ((size - crop) / 2, (size - crop) / 2)
    };
    let plane = crop * crop;
    let mut px = vec![0f32; 3 * plane];
    for y in 0..crop {
        for x in 0..crop {
            let p = src.get_pixel((ox + x) as u32, (oy + y) as u32).0;
            for c in 0..3 {
                px[c * plane + y * crop + x] = p[c] as f32 / 255.0;
            }
        }
    }

    if train_mode {
        jitter(&mut px, plane, policy.color_jitter, rng);
        if rng.gen::<f32>() < policy.horizontal_flip_prob {
            for row in px.chunks_mut(crop) {
                row.reverse();
            }
        }
    }

    for c in 0..3 {
        let (m, s) = (policy.mean[c], policy.std[c]);
        px[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(Tensor::from_vec(&[3, crop, crop], px))
}

fn factor<R: Rng + ?Sized>(magnitude: f32, rng: &mut R) -> f32 {
    rng.gen_range((1.0 - magnitude).max(0.0)..=1.0 + magnitude)
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, then contrast, then saturation; values are clamped to `[0, 1]` after each.
fn jitter<R: Rng + ?Sized>(px: &mut [f32], plane: usize, magnitudes: [f32; 3], rng: &mut R) {
    let fb = factor(magnitudes[0], rng);
    let fc = factor(magnitudes[1], rng);
    let fs = factor(magnitudes[2], rng);

    px.iter_mut().for_each(|v| *v = (*v * fb).clamp(0.0, 1.0));

    let (r, rest) = px.split_at_mut(plane);
    let (g, b) = rest.split_at_mut(plane);
    let mean = (0..plane).map(|i| luma(r[i], g[i], b[i])).sum::<f32>() / plane as f32;
    for ch in [&mut *r, &mut *g, &mut *b] {
        ch.iter_mut().for_each(|v| *v = (fc * *v + (1.0 - fc) * mean).clamp(0.0, 1.0));
    }

    for i in 0..plane {
        let gray = luma(r[i], g[i], b[i]);
        for ch in [&mut r[i], &mut g[i], &mut b[i]] {
            *ch = (fs * *ch + (1.0 - fs) * gray).clamp(0.0, 1.0);
        }
    }
}

//! Procedurally generated datasets of colored blobs.
//!
//! Each class owns a hue, a shape, a mean position, and a radius; samples jitter
//! those parameters and add Gaussian pixel noise.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, SampleRecord};
use crate::episode::{derive_seed, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Standard deviation of additive pixel noise, in `[0, 1]` intensity units.
    pub noise_std: f64,
    /// Scale of per-sample variation in position, size, and color (0 = every sample of a class is identical).
    pub jitter: f64,
    /// Number of classes assigned to train, val, and test, in class order.
    pub split: [usize; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 10,
            samples_per_class: 40,
            image_size: 84,
            noise_std: 0.0,
            jitter: 1.0,
            split: [6, 2, 2],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSynthetic(m));
        if self.n_classes == 0 || self.samples_per_class == 0 {
            return bad("n_classes and samples_per_class must be positive".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is below 8 px", self.image_size));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) || !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return bad("noise_std and jitter must be finite and non-negative".into());
        }
        if self.split.iter().sum::<usize>() != self.n_classes {
            return bad(format!("split {:?} does not add up to {} classes", self.split, self.n_classes));
        }
        Ok(())
    }

    pub fn class_name(c: usize) -> String {
        format!("synth_{c:03}")
    }

    fn split_of(&self, c: usize) -> Split {
        if c < self.split[0] {
            Split::Train
        } else if c < self.split[0] + self.split[1] {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub manifest: Manifest,
    /// `images[i]` belongs to `manifest.records[i]`.
    pub images: Vec<RgbImage>,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disc,
    Square,
    Ring,
    Cross,
}

#[derive(Debug, Clone, Copy)]
struct ClassStyle {
    hue: f64,
    shape: Shape,
    cx: f64,
    cy: f64,
    radius: f64,
}

fn frac(x: f64) -> f64 {
    x - x.floor()
}

fn class_style(c: usize) -> ClassStyle {
    let c = c as f64;
    let shape = match (c as usize) % 4 {
        0 => Shape::Disc,
        1 => Shape::Square,
        2 => Shape::Ring,
        _ => Shape::Cross,
    };
    ClassStyle {
        hue: frac(0.07 + c * 0.618_033_988_749_895),
        shape,
        cx: 0.3 + 0.4 * frac(0.5 + c * 0.754_877_666_246_693),
        cy: 0.3 + 0.4 * frac(0.5 + c * 0.569_840_290_998_053),
        radius: 0.2 + 0.1 * frac(c * 0.414_213_562_373_095),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = frac(h) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        Shape::Disc => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        Shape::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        Shape::Cross => (dx.abs() <= r * 0.35 && dy.abs() <= r) || (dy.abs() <= r * 0.35 && dx.abs() <= r),
    }
}

fn render<R: Rng>(style: ClassStyle, spec: &SyntheticSpec, rng: &mut R) -> RgbImage {
    let j = spec.jitter;
    let mut u = || rng.gen_range(-1.0..=1.0) * j;
    let cx = style.cx + 0.08 * u();
    let cy = style.cy + 0.08 * u();
    let radius = style.radius * (1.0 + 0.15 * u());
    let hue = style.hue + 0.015 * u();
    let value = 0.85 + 0.1 * u().clamp(-1.0, 1.0);
    let fg = hsv_to_rgb(hue, 0.85, value);
    let bg = [0.18, 0.18, 0.2];

    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
    let size = spec.image_size;
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let fx = (x as f64 + 0.5) / size as f64;
            let fy = (y as f64 + 0.5) / size as f64;
            let color = if inside(style.shape, fx - cx, fy - cy, radius) { fg } else { bg };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
                px[c] = ((color[c] + n).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Generates a deterministic dataset; sample `i` of class `c` is `synth_ccc/iiii.png`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut records = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    let mut images = Vec::with_capacity(records.capacity());
    for c in 0..spec.n_classes {
        let style = class_style(c);
        let class = SyntheticSpec::class_name(c);
        for i in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[c as u64, i as u64]));
            images.push(render(style, spec, &mut rng));
            records.push(SampleRecord {
                key: format!("{class}/{i:04}.png"),
                class: class.clone(),
                split: spec.split_of(c),
            });
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        manifest: Manifest::from_records(records),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::validate_split;

    #[test]
    fn counting() {
        let spec = SyntheticSpec {
            n_classes: 2,
            samples_per_class: 2,
            split: [1, 1, 0],
            ..Default::default()
        };
        let ds = generate_synthetic(&spec, 0).unwrap();
        assert_eq!(ds.images.len(), 4);
        assert_eq!(ds.manifest.index.num_classes(), 2);
    }

    #[test]
    fn seed_determinism() {
        let spec = SyntheticSpec {
            image_size: 24,
            noise_std: 0.1,
            ..Default::default()
        };
        let a = generate_synthetic(&spec, 9).unwrap();
        let b = generate_synthetic(&spec, 9).unwrap();
        assert!(a.images.iter().zip(&b.images).all(|(x, y)| x.as_raw() == y.as_raw()));
        let c = generate_synthetic(&spec, 10).unwrap();
        assert!(a.images.iter().zip(&c.images).any(|(x, y)| x.as_raw() != y.as_raw()));
    }

    #[test]
    fn default_split_validates() {
        let ds = generate_synthetic(&SyntheticSpec { image_size: 16, ..Default::default() }, 0).unwrap();
        let v = validate_split(&ds.manifest.splits, &ds.manifest.index).unwrap();
        assert_eq!((v.counts.train, v.counts.val, v.counts.test), (6, 2, 2));
    }

    #[test]
    fn zero_jitter_zero_noise_repeats_class_image() {
        let spec = SyntheticSpec {
            jitter: 0.0,
            samples_per_class: 3,
            image_size: 16,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec, 1).unwrap();
        assert_eq!(ds.images[0], ds.images[1]);
        assert_ne!(ds.images[0], ds.images[3]);
    }

    #[test]
    fn invalid_specs() {
        let bad = SyntheticSpec {
            split: [5, 5, 5],
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&bad, 0), Err(Error::InvalidSynthetic(_))));
        let bad = SyntheticSpec {
            image_size: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

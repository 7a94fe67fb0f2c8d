//! Synthetic image classification sets in the CIFAR layout.
//!
//! Each class is an oriented colour grating with its own spatial frequency; samples
//! draw a random phase, contrast, additive noise and a distracting blob, so classes
//! are separable by local texture but not by any single pixel.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

use super::Dataset;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    /// `[C, H, W]`.
    pub dims: [usize; 3],
    /// Std of the additive pixel noise, in 8-bit units.
    pub noise: f64,
}

impl SyntheticSpec {
    pub fn cifar10_like() -> Self {
        Self {
            num_classes: 10,
            dims: [3, 32, 32],
            noise: 40.0,
        }
    }

    /// Orientation, frequency (cycles per pixel) and per-channel colour weights of `class`.
    /// Depends only on the class index so separately generated splits agree.
    pub fn class_pattern(&self, class: usize) -> (f64, f64, Vec<f64>) {
        let k = self.num_classes as f64;
        let theta = PI * class as f64 / k;
        let freq = [0.09, 0.16, 0.24][class % 3];
        let c = self.dims[0];
        let colour = (0..c)
            .map(|ch| 0.55 + 0.45 * ((class * 7 + ch * 3) as f64 * 1.3).cos())
            .collect();
        (theta, freq, colour)
    }
}

/// `count` samples with labels `i mod num_classes`, reproducible from `seed`.
pub fn synthetic(spec: &SyntheticSpec, count: usize, seed: u64) -> Result<Dataset> {
    if spec.num_classes < 2 {
        return Err(Error::Param("synthetic data needs at least two classes".into()));
    }
    let [c, h, w] = spec.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Param(e.to_string()))?;
    let patterns: Vec<_> = (0..spec.num_classes).map(|k| spec.class_pattern(k)).collect();
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * c * h * w);
    for i in 0..count {
        let class = i % spec.num_classes;
        let (theta, freq, colour) = &patterns[class];
        let phase = rng.random_range(0.0..2.0 * PI);
        let contrast = rng.random_range(45.0..90.0);
        let base = rng.random_range(90.0..165.0);
        let (bx, by) = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
        let blob_amp = rng.random_range(-70.0..70.0);
        let blob_r2 = rng.random_range(4.0..30.0f64);
        let (ct, st) = (theta.cos(), theta.sin());
        for &cw in colour.iter() {
            for y in 0..h {
                for x in 0..w {
                    let (xf, yf) = (x as f64, y as f64);
                    let wave = (2.0 * PI * freq * (xf * ct + yf * st) + phase).sin();
                    let d2 = (xf - bx).powi(2) + (yf - by).powi(2);
                    let blob = blob_amp * (-d2 / blob_r2).exp();
                    let v = base + contrast * cw * wave + blob + noise.sample(&mut rng);
                    pixels.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(class as u16);
    }
    Dataset::new(spec.dims, spec.num_classes, labels, pixels)
}

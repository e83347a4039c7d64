//! Synthetic toy images for desk-scale runs.
//!
//! Every class owns a low-frequency pattern family: horizontal stripes,
//! vertical stripes, a checkerboard or concentric rings, at one of three
//! frequency bands. A sample draws its own phase, frequency, colours and
//! centre, blends its class pattern with a weaker pattern from another
//! class, and adds pixel noise. All families survive horizontal flips, so
//! flipping never changes the class.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{LabeledImageDataset, Split};
use crate::error::{Error, Result};
use crate::image::{ImageSet, ImageShape};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub num_classes: usize,
    /// Side length in pixels.
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of additive pixel noise, in [0, 1] intensity units.
    pub pixel_noise: f64,
    /// Lower bound on the class pattern's blend weight (upper bound is 1).
    pub min_mix: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            train_size: 3000,
            test_size: 1000,
            num_classes: 3,
            image_size: 8,
            seed: 0,
            pixel_noise: 0.08,
            min_mix: 0.6,
        }
    }
}

const FAMILIES: usize = 4;
const BANDS: usize = 3;

struct Pattern {
    family: usize,
    freq: f64,
    phase_x: f64,
    phase_y: f64,
    cx: f64,
    cy: f64,
}

impl Pattern {
    fn draw<R: Rng>(class: usize, size: usize, rng: &mut R) -> Self {
        let band = class / FAMILIES;
        let base = 1.0 + band as f64 * 0.75;
        let s = size as f64;
        Self {
            family: class % FAMILIES,
            freq: rng.random_range(base..base + 0.6),
            phase_x: rng.random_range(0.0..2.0 * PI),
            phase_y: rng.random_range(0.0..2.0 * PI),
            cx: rng.random_range(0.25 * s..0.75 * s),
            cy: rng.random_range(0.25 * s..0.75 * s),
        }
    }

    /// Value in [-1, 1] at pixel centre (x, y).
    fn at(&self, x: f64, y: f64, size: f64) -> f64 {
        let w = 2.0 * PI * self.freq / size;
        match self.family {
            0 => (w * y + self.phase_y).sin(),
            1 => (w * x + self.phase_x).sin(),
            2 => (w * x + self.phase_x).sin() * (w * y + self.phase_y).sin(),
            _ => {
                let r = ((x - self.cx).powi(2) + (y - self.cy).powi(2)).sqrt();
                (w * r + self.phase_x).sin()
            }
        }
    }
}

impl BlobsConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.num_classes;
        if !(2..=FAMILIES * BANDS).contains(&k) {
            return Err(Error::config(
                "blobs.num_classes",
                format!("must be in [2, {}]", FAMILIES * BANDS),
            ));
        }
        if self.image_size < 4 {
            return Err(Error::config("blobs.image_size", "must be at least 4"));
        }
        if !(0.5..=1.0).contains(&self.min_mix) {
            return Err(Error::config("blobs.min_mix", "must lie in [0.5, 1]"));
        }
        if !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            return Err(Error::config("blobs.pixel_noise", "must be finite and non-negative"));
        }
        Ok(())
    }
}

pub fn generate_blobs(config: &BlobsConfig, split: Split) -> Result<LabeledImageDataset> {
    config.validate()?;
    let k = config.num_classes;
    let (n, tag) = match split {
        Split::Train => (config.train_size, "blobs-train"),
        Split::Test => (config.test_size, "blobs-test"),
    };
    if n == 0 {
        return Err(Error::config("blobs.train_size", "dataset must be non-empty"));
    }

    let size = config.image_size;
    let shape = ImageShape::new(size, size, 3);
    let mut rng = rng_for(config.seed, tag);
    let noise = Normal::new(0.0, config.pixel_noise.max(1e-12)).expect("valid std");
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * shape.len());

    for i in 0..n {
        // Balanced classes, shuffled by the pattern draws themselves.
        let class = i % k;
        let mut other = rng.random_range(0..k - 1);
        if other >= class {
            other += 1;
        }
        let main = Pattern::draw(class, size, &mut rng);
        let distractor = Pattern::draw(other, size, &mut rng);
        let mix = rng.random_range(config.min_mix..=1.0);
        let offsets: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
        let amps: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.3));
        let sf = size as f64;
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let v = mix * main.at(px, py, sf) + (1.0 - mix) * distractor.at(px, py, sf);
                for c in 0..3 {
                    let mut p = offsets[c] + amps[c] * v;
                    if config.pixel_noise > 0.0 {
                        p += noise.sample(&mut rng);
                    }
                    pixels.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(class);
    }
    LabeledImageDataset::new(ImageSet::new(shape, pixels), labels, k)
}

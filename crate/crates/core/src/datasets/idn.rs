//! Synthetic instance-dependent label noise.
//!
//! Each image is flattened, centred and projected to a short feature vector
//! through a fixed random matrix. A per-class random matrix scores the
//! wrong classes from those features; a flipped sample moves to its
//! highest-scoring wrong class. Flip rates come from a normal distribution
//! around the target rate, truncated to [0, 1], drawn from a stream keyed by
//! the image bytes. The acceptance draw for sample `i` is `u_i < s·q_i`
//! where `u_i` is a hash-derived uniform and `s` is a single global scale
//! solved from the order statistics of `u_i / q_i`, so the realised rate
//! hits the target up to ties.
//!
//! Every quantity depends only on the image bytes, the clean label and the
//! spec, never on the sample's position, so duplicated images always share
//! their flip decision.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::LabeledImageDataset;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, fnv1a64, rng_for, splitmix64, unit_from_hash, Rng as SeedRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdnSpec {
    pub target_rate: f64,
    pub seed: u64,
    pub rate_spread: f64,
    pub feature_projection_dim: usize,
}

impl Default for IdnSpec {
    fn default() -> Self {
        Self {
            target_rate: 0.2,
            seed: 0,
            rate_spread: 0.1,
            feature_projection_dim: 32,
        }
    }
}

impl IdnSpec {
    pub fn new(target_rate: f64, seed: u64) -> Self {
        Self {
            target_rate,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.target_rate) {
            return Err(Error::config("noise.target_rate", "must lie in [0, 1)"));
        }
        if !(self.rate_spread >= 0.0 && self.rate_spread.is_finite()) {
            return Err(Error::config("noise.rate_spread", "must be finite and non-negative"));
        }
        if self.feature_projection_dim == 0 {
            return Err(Error::config("noise.feature_projection_dim", "must be positive"));
        }
        Ok(())
    }
}

/// Exact record of the corruption applied to a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct FlipLedger {
    pub sample_ids: Vec<u64>,
    pub flipped: Vec<bool>,
    pub original_label: Vec<usize>,
    pub corrupted_label: Vec<usize>,
    pub per_sample_flip_rate: Vec<f64>,
}

impl FlipLedger {
    pub fn len(&self) -> usize {
        self.flipped.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flipped.is_empty()
    }

    pub fn flip_count(&self) -> usize {
        self.flipped.iter().filter(|&&f| f).count()
    }

    pub fn realized_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.flip_count() as f64 / self.len() as f64
        }
    }

    /// Tab-separated audit file: `sample_id clean noisy flip_rate`.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let csv_err = |e: csv::Error| Error::io(path, e.into());
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path).map_err(csv_err)?;
        for i in 0..self.len() {
            w.serialize(LedgerRow {
                sample_id: self.sample_ids[i],
                clean: self.original_label[i],
                noisy: self.corrupted_label[i],
                flip_rate: self.per_sample_flip_rate[i],
            })
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let bad = |e: csv::Error| Error::ingestion(path, e.to_string());
        let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path).map_err(bad)?;
        let header = r.headers().map_err(bad)?;
        if header.iter().ne(["sample_id", "clean", "noisy", "flip_rate"]) {
            return Err(Error::ingestion(path, format!("unexpected header {header:?}")));
        }
        let mut ledger = FlipLedger {
            sample_ids: Vec::new(),
            flipped: Vec::new(),
            original_label: Vec::new(),
            corrupted_label: Vec::new(),
            per_sample_flip_rate: Vec::new(),
        };
        for row in r.deserialize::<LedgerRow>() {
            let row = row.map_err(bad)?;
            ledger.sample_ids.push(row.sample_id);
            ledger.original_label.push(row.clean);
            ledger.corrupted_label.push(row.noisy);
            ledger.flipped.push(row.clean != row.noisy);
            ledger.per_sample_flip_rate.push(row.flip_rate);
        }
        Ok(ledger)
    }
}

#[derive(Serialize, Deserialize)]
struct LedgerRow {
    sample_id: u64,
    clean: usize,
    noisy: usize,
    flip_rate: f64,
}

struct Projection {
    dim: usize,
    features: Vec<f64>,   // dim × input_len, row-major
    class_maps: Vec<f64>, // K × dim × K
}

impl Projection {
    fn new(spec: &IdnSpec, input_len: usize, k: usize) -> Self {
        let mut rng = rng_for(spec.seed, "idn-projection");
        let scale = 1.0 / (input_len as f64).sqrt();
        let dim = spec.feature_projection_dim;
        let features = (0..dim * input_len)
            .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
            .collect();
        let class_maps = (0..k * dim * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            dim,
            features,
            class_maps,
        }
    }

    fn wrong_class(&self, pixels: &[u8], label: usize, k: usize) -> usize {
        let n = pixels.len();
        let mut f = vec![0.0; self.dim];
        for (a, fa) in f.iter_mut().enumerate() {
            let row = &self.features[a * n..(a + 1) * n];
            *fa = row
                .iter()
                .zip(pixels)
                .map(|(w, &p)| w * (p as f64 / 255.0 - 0.5))
                .sum();
        }
        let map = &self.class_maps[label * self.dim * k..(label + 1) * self.dim * k];
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for j in (0..k).filter(|&j| j != label) {
            let score: f64 = (0..self.dim).map(|a| f[a] * map[a * k + j]).sum();
            if best.0 == usize::MAX || score > best.1 {
                best = (j, score);
            }
        }
        best.0
    }
}

fn truncated_normal(mean: f64, std: f64, rng: &mut SeedRng) -> f64 {
    if std == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let dist = Normal::new(mean, std).expect("finite std");
    for _ in 0..64 {
        let v = dist.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
    mean.clamp(0.0, 1.0)
}

/// Corrupts the noisy and working tracks of `dataset` and returns the ledger.
pub fn inject_idn(
    mut dataset: LabeledImageDataset,
    spec: &IdnSpec,
) -> Result<(LabeledImageDataset, FlipLedger)> {
    spec.validate()?;
    let k = dataset.num_classes();
    let ceiling = 1.0 - 1.0 / k as f64;
    if spec.target_rate >= ceiling {
        return Err(Error::config(
            "noise.target_rate",
            format!("must be below 1 - 1/K = {ceiling:.4} for K = {k}"),
        ));
    }
    let n = dataset.len();
    let clean = dataset.oracle().clean_labels().to_vec();
    let projection = Projection::new(spec, dataset.images.shape().len(), k);
    let sample_key = derive_seed(spec.seed, "idn-sample");

    let mut rates = Vec::with_capacity(n);
    let mut ratios = Vec::with_capacity(n);
    for (img, &label) in dataset.images.iter().zip(&clean) {
        let key = splitmix64(fnv1a64(img.data) ^ sample_key);
        let mut rng = SeedRng::seed_from_u64(key);
        let q = truncated_normal(spec.target_rate, spec.rate_spread, &mut rng);
        let u = unit_from_hash(splitmix64(key ^ splitmix64(label as u64 + 1)));
        rates.push(q);
        ratios.push(if q > 0.0 { u / q } else { f64::INFINITY });
    }

    let wanted = (spec.target_rate * n as f64).round() as usize;
    let scale = if wanted == 0 {
        0.0
    } else {
        let mut sorted: Vec<f64> = ratios.iter().copied().filter(|r| r.is_finite()).collect();
        sorted.sort_by(f64::total_cmp);
        sorted.get(wanted.min(sorted.len()) - 1).copied().unwrap_or(0.0)
    };

    let mut corrupted = clean.clone();
    let mut flipped = vec![false; n];
    for i in 0..n {
        if wanted > 0 && ratios[i] <= scale {
            let img = dataset.images.get(i);
            corrupted[i] = projection.wrong_class(img.data, clean[i], k);
            flipped[i] = true;
        }
    }
    let per_sample_flip_rate = rates.iter().map(|q| (q * scale).min(1.0)).collect();
    let ledger = FlipLedger {
        sample_ids: dataset.sample_ids().to_vec(),
        flipped,
        original_label: clean,
        corrupted_label: corrupted,
        per_sample_flip_rate,
    };
    dataset.apply_ledger(&ledger)?;
    Ok((dataset, ledger))
}

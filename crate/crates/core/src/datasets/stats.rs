use serde::{Deserialize, Serialize};

use super::{FlipLedger, LabeledImageDataset};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub overall_rate: f64,
    pub per_class_rate: Vec<f64>,
    /// `confusion[clean][noisy]` sample counts.
    pub confusion: Vec<Vec<u64>>,
}

pub fn noise_statistics(dataset: &LabeledImageDataset, ledger: &FlipLedger) -> Result<NoiseReport> {
    let n = dataset.len();
    let lengths = [
        ledger.flipped.len(),
        ledger.original_label.len(),
        ledger.corrupted_label.len(),
        ledger.per_sample_flip_rate.len(),
    ];
    if lengths.iter().any(|&l| l != n) {
        return Err(Error::Integrity(format!(
            "ledger columns {lengths:?} do not match dataset size {n}"
        )));
    }
    let k = dataset.num_classes();
    let mut confusion = vec![vec![0u64; k]; k];
    for (&c, &z) in ledger.original_label.iter().zip(&ledger.corrupted_label) {
        if c >= k || z >= k {
            return Err(Error::Integrity(format!("ledger label pair ({c}, {z}) outside [0, {k})")));
        }
        confusion[c][z] += 1;
    }
    let per_class_rate = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                (total - row[c]) as f64 / total as f64
            }
        })
        .collect();
    Ok(NoiseReport {
        overall_rate: ledger.realized_rate(),
        per_class_rate,
        confusion,
    })
}

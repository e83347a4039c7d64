//! Test accuracy, oracle label-quality metrics and result tables.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{LabelOracle, LabeledImageDataset};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::refinery::RefinementState;
use crate::trainer::predict;

/// Published accuracies (percent) for the full-scale runs this pipeline
/// targets: (dataset, noise rate, accuracy).
pub const REFERENCE_ACCURACY: [(&str, f64, f64); 4] = [
    ("cifar10", 0.2, 88.41),
    ("cifar10", 0.5, 60.10),
    ("cifar100", 0.2, 63.42),
    ("cifar100", 0.5, 48.57),
];

pub fn reference_accuracy(dataset: &str, noise_rate: f64) -> Option<f64> {
    REFERENCE_ACCURACY
        .iter()
        .find(|(d, r, _)| *d == dataset && (r - noise_rate).abs() < 1e-9)
        .map(|&(_, _, a)| a)
}

/// Fraction of positions where `predictions` and `labels` agree.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Contract("accuracy over an empty set".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Un-augmented test accuracy against the clean labels of `test`.
pub fn accuracy(model: &ModelState, test: &LabeledImageDataset, eval_batch: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract("accuracy over an empty set".into()));
    }
    let predictions = predict(model, &test.images, eval_batch)?;
    accuracy_of(&predictions, test.oracle().clean_labels())
}

/// Label quality after one iteration. Iteration 0 describes the labels
/// before refinement and has no consensus. Fields are `None` when clean
/// labels are unavailable or the quantity is undefined (empty consensus).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub iteration: usize,
    pub working_label_accuracy: Option<f64>,
    /// Clean fraction of the whole base set at selection time.
    pub selection_base_clean_fraction: Option<f64>,
    pub consensus_size: usize,
    /// Clean fraction of the consensus set at selection time.
    pub consensus_clean_fraction: Option<f64>,
    /// Clean fraction of the pseudo-labels assigned this iteration.
    pub pseudo_label_precision: Option<f64>,
    /// Consensus samples whose label value actually changed.
    pub labels_changed: usize,
    pub injected_total: usize,
}

fn clean_fraction(ids: impl ExactSizeIterator<Item = usize>, labels: &[usize], clean: &[usize]) -> Option<f64> {
    let n = ids.len();
    if n == 0 {
        return None;
    }
    let hits = ids.filter(|&i| labels[i] == clean[i]).count();
    Some(hits as f64 / n as f64)
}

/// One row per completed iteration plus an iteration-0 row.
/// `initial_labels` are the working labels before iteration 1.
pub fn label_quality(
    state: &RefinementState,
    initial_labels: &[usize],
    oracle: Option<&LabelOracle<'_>>,
) -> Result<Vec<QualityRow>> {
    let n = initial_labels.len();
    let clean = oracle.map(|o| o.clean_labels());
    if let Some(c) = clean {
        if c.len() != n {
            return Err(Error::Integrity(format!("{} clean labels for {n} samples", c.len())));
        }
    }
    let all = |labels: &[usize]| clean.and_then(|c| clean_fraction(0..n, labels, c));
    let mut rows = vec![QualityRow {
        iteration: 0,
        working_label_accuracy: all(initial_labels),
        selection_base_clean_fraction: None,
        consensus_size: 0,
        consensus_clean_fraction: None,
        pseudo_label_precision: None,
        labels_changed: 0,
        injected_total: 0,
    }];
    for rec in &state.history {
        if rec.labels_before.len() != n || rec.labels_after.len() != n {
            return Err(Error::Integrity(format!("iteration {} label tracks do not cover {n} samples", rec.iteration)));
        }
        let ids = || rec.consensus.iter().copied();
        rows.push(QualityRow {
            iteration: rec.iteration,
            working_label_accuracy: all(&rec.labels_after),
            selection_base_clean_fraction: all(&rec.labels_before),
            consensus_size: rec.consensus.len(),
            consensus_clean_fraction: clean.and_then(|c| clean_fraction(ids(), &rec.labels_before, c)),
            pseudo_label_precision: clean.and_then(|c| clean_fraction(ids(), &rec.labels_after, c)),
            labels_changed: ids().filter(|&i| rec.labels_before[i] != rec.labels_after[i]).count(),
            injected_total: rec.injected_total,
        });
    }
    Ok(rows)
}

/// Writes quality rows as CSV; undefined fields are left empty.
pub fn write_quality_csv(path: &Path, rows: &[QualityRow]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a table written by [`write_quality_csv`].
pub fn read_quality_csv(path: &Path) -> Result<Vec<QualityRow>> {
    let bad = |e: csv::Error| Error::ingestion(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    r.deserialize().map(|row| row.map_err(bad)).collect()
}

/// Outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub noise_rate: f64,
    pub method: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub warmup_test_accuracy: Option<f64>,
    pub quality: Vec<QualityRow>,
}

impl MetricsReport {
    pub fn validate(&self, num_samples: usize) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        let mut ok = frac(self.test_accuracy) && frac(self.noise_rate);
        ok &= self.warmup_test_accuracy.is_none_or(frac);
        for q in &self.quality {
            ok &= q.consensus_size <= num_samples;
            for v in [
                q.working_label_accuracy,
                q.selection_base_clean_fraction,
                q.consensus_clean_fraction,
                q.pseudo_label_precision,
            ]
            .into_iter()
            .flatten()
            {
                ok &= frac(v);
            }
        }
        if ok {
            Ok(())
        } else {
            Err(Error::Integrity("metrics report holds a value outside [0, 1]".into()))
        }
    }
}

/// One line of the result table; percentages rounded to two decimals.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub dataset: String,
    pub noise_pct: f64,
    pub method: String,
    pub seed: u64,
    pub test_accuracy_pct: f64,
    pub warmup_accuracy_pct: Option<f64>,
    pub final_label_accuracy_pct: Option<f64>,
    pub reference_pct: Option<f64>,
}

fn pct(x: f64) -> f64 {
    (x * 10_000.0).round() / 100.0
}

impl From<&MetricsReport> for TableRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            dataset: r.dataset.clone(),
            noise_pct: pct(r.noise_rate),
            method: r.method.clone(),
            seed: r.seed,
            test_accuracy_pct: pct(r.test_accuracy),
            warmup_accuracy_pct: r.warmup_test_accuracy.map(pct),
            final_label_accuracy_pct: r.quality.last().and_then(|q| q.working_label_accuracy).map(pct),
            reference_pct: reference_accuracy(&r.dataset, r.noise_rate),
        }
    }
}

const TABLE_HEADER: [&str; 8] = [
    "dataset",
    "noise_pct",
    "method",
    "seed",
    "test_accuracy_pct",
    "warmup_accuracy_pct",
    "final_label_accuracy_pct",
    "reference_pct",
];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.2}"))
}

/// Writes one CSV row per report.
pub fn emit_report(reports: &[MetricsReport], path: &Path) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::Contract("emit_report needs at least one report".into()));
    }
    let csv_err = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(TABLE_HEADER).map_err(csv_err)?;
    for r in reports {
        let t = TableRow::from(r);
        w.write_record([
            t.dataset,
            format!("{:.2}", t.noise_pct),
            t.method,
            t.seed.to_string(),
            format!("{:.2}", t.test_accuracy_pct),
            cell(t.warmup_accuracy_pct),
            cell(t.final_label_accuracy_pct),
            cell(t.reference_pct),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct WireRow {
    dataset: String,
    noise_pct: f64,
    method: String,
    seed: u64,
    test_accuracy_pct: f64,
    warmup_accuracy_pct: Option<f64>,
    final_label_accuracy_pct: Option<f64>,
    reference_pct: Option<f64>,
}

/// Parses a table written by [`emit_report`].
pub fn parse_report(path: &Path) -> Result<Vec<TableRow>> {
    let bad = |e: csv::Error| Error::ingestion(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(bad)?;
    if r.headers().map_err(bad)?.iter().ne(TABLE_HEADER) {
        return Err(Error::ingestion(path, "unexpected header"));
    }
    r.deserialize::<WireRow>()
        .map(|row| {
            let w = row.map_err(bad)?;
            Ok(TableRow {
                dataset: w.dataset,
                noise_pct: w.noise_pct,
                method: w.method,
                seed: w.seed,
                test_accuracy_pct: w.test_accuracy_pct,
                warmup_accuracy_pct: w.warmup_accuracy_pct,
                final_label_accuracy_pct: w.final_label_accuracy_pct,
                reference_pct: w.reference_pct,
            })
        })
        .collect()
}

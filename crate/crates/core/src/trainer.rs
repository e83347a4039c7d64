//! Supervised training on the working labels and per-sample loss
//! evaluation for the refinery's stage snapshots.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{FloatImage, LightAugment};
use crate::datasets::LabeledImageDataset;
use crate::error::{Error, Result};
use crate::image::{Image, ImageSet};
use crate::linalg::Matrix;
use crate::model::{cosine_lr, logits_for, InputBatch, ModelState};
use crate::pretrain::annotate;
use crate::seed::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainPhaseConfig {
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of `learning_rate`.
    pub lr_floor: f64,
    /// Selection threshold θ on per-sample cross-entropy.
    pub loss_threshold: f64,
    pub light_augment: LightAugment,
    /// Inference chunk size for loss evaluation.
    pub eval_batch: usize,
}

impl Default for TrainPhaseConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            batch_size: 64,
            learning_rate: 0.05,
            lr_floor: 0.0,
            loss_threshold: 1.0,
            light_augment: LightAugment::default(),
            eval_batch: 256,
        }
    }
}

impl TrainPhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::config("train.lr_floor", "must lie in [0, 1]"));
        }
        if self.loss_threshold.is_nan() || self.loss_threshold < 0.0 {
            return Err(Error::config("train.loss_threshold", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.light_augment.flip_prob) {
            return Err(Error::config("train.light_augment.flip_prob", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[label]`, stabilized with log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Contract(format!("label {label} outside [0, {})", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Mean cross-entropy over rows and its gradient with respect to the logits.
pub fn cross_entropy_batch(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if labels.len() != logits.rows {
        return Err(Error::Contract(format!("{} labels for {} rows", labels.len(), logits.rows)));
    }
    let n = logits.rows.max(1) as f64;
    let mut grad = Matrix::zeros(logits.rows, logits.cols);
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        total += cross_entropy(row, label)?;
        let lse = log_sum_exp(row);
        let g = grad.row_mut(r);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = ((row[j] - lse).exp() - if j == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((total / n, grad))
}

/// Base samples (augmented lightly each epoch) plus pre-augmented extras.
pub struct TrainView<'a> {
    pub images: &'a ImageSet,
    pub labels: &'a [usize],
    pub extra: Vec<(&'a Image, usize)>,
}

impl<'a> TrainView<'a> {
    pub fn base(dataset: &'a LabeledImageDataset) -> Self {
        Self {
            images: &dataset.images,
            labels: dataset.working_labels(),
            extra: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len() + self.extra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub sample_count: usize,
    pub learning_rate: f64,
}

/// One pass over `view` in a freshly shuffled order.
pub fn train_epoch(
    state: &mut ModelState,
    view: &TrainView<'_>,
    config: &TrainPhaseConfig,
    lr: f64,
    rng: &mut Rng,
    phase: &str,
) -> Result<EpochStats> {
    if view.is_empty() {
        return Err(Error::Contract("training view is empty".into()));
    }
    if view.labels.len() != view.images.len() {
        return Err(Error::Integrity("label track does not match base images".into()));
    }
    let input = state.spec().encoder.input;
    let base = view.images.len();
    let mut order: Vec<usize> = (0..view.len()).collect();
    order.shuffle(rng);
    let mut weighted = 0.0;
    for (b, chunk) in order.chunks(config.batch_size).enumerate() {
        let mut images = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &i in chunk {
            if i < base {
                images.push(config.light_augment.apply(view.images.get(i), rng));
                labels.push(view.labels[i]);
            } else {
                let (img, label) = view.extra[i - base];
                images.push(FloatImage::from_u8(img.view()));
                labels.push(label);
            }
        }
        let batch = InputBatch::from_float(input, &images)?;
        let (emb, tape) = state.encode_with_tape(&batch)?;
        let logits = state.classify(&emb)?;
        let (loss, d_logits) = cross_entropy_batch(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                phase: phase.into(),
                epoch: state.epoch + 1,
                batch: b,
                what: format!("cross-entropy {loss}"),
            });
        }
        let mut grads = state.zero_gradients();
        let d_emb = state.classifier_backward(&emb, &d_logits, &mut grads);
        state.encoder_backward(&tape, &d_emb, &mut grads);
        state
            .apply_gradients(&grads, lr)
            .map_err(|e| annotate(e, phase, state.epoch + 1, b))?;
        weighted += loss * chunk.len() as f64;
    }
    state.epoch += 1;
    Ok(EpochStats {
        mean_loss: weighted / view.len() as f64,
        sample_count: view.len(),
        learning_rate: lr,
    })
}

/// Supervised warmup on the working labels.
pub fn warmup(
    state: &mut ModelState,
    dataset: &LabeledImageDataset,
    config: &TrainPhaseConfig,
    rng: &mut Rng,
) -> Result<Vec<EpochStats>> {
    config.validate()?;
    let mut log = Vec::with_capacity(config.warmup_epochs);
    if config.warmup_epochs == 0 {
        return Ok(log);
    }
    state.reset_optimizer();
    let view = TrainView::base(dataset);
    for e in 0..config.warmup_epochs {
        let lr = cosine_lr(config.learning_rate, e, config.warmup_epochs, config.lr_floor);
        let stats = train_epoch(state, &view, config, lr, rng, "warmup")?;
        info!("warmup epoch {}/{}: loss {:.4}", e + 1, config.warmup_epochs, stats.mean_loss);
        log.push(stats);
    }
    Ok(log)
}

/// Cross-entropy of every base sample against its working label, computed
/// on un-augmented images.
pub fn per_sample_losses(state: &ModelState, dataset: &LabeledImageDataset, eval_batch: usize) -> Result<Vec<f64>> {
    let logits = logits_for(state, &dataset.images, eval_batch)?;
    dataset
        .working_labels()
        .iter()
        .enumerate()
        .map(|(i, &label)| cross_entropy(logits.row(i), label))
        .collect()
}

/// Argmax predictions on un-augmented images.
pub fn predict(state: &ModelState, images: &ImageSet, eval_batch: usize) -> Result<Vec<usize>> {
    Ok(logits_for(state, images, eval_batch)?.argmax_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        for k in [2usize, 10, 100] {
            let l = cross_entropy(&vec![0.3; k], 1).unwrap();
            assert!((l - (k as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_and_hand_cases() {
        let mut logits = vec![0.0; 10];
        logits[4] = 1000.0;
        assert!(cross_entropy(&logits, 4).unwrap() < 1e-6);
        let l = cross_entropy(&[1.0, 0.0], 0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(cross_entropy(&[0.0, 1.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn shift_invariance() {
        let a = cross_entropy(&[0.1, 2.0, -1.0], 2).unwrap();
        let b = cross_entropy(&[100.1, 102.0, 99.0], 2).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let logits = Matrix::from_rows(&[vec![0.2, -1.0, 0.5], vec![1.5, 0.3, -0.2]]);
        let labels = [2, 0];
        let (_, g) = cross_entropy_batch(&logits, &labels).unwrap();
        for idx in 0..6 {
            let mut p = logits.clone();
            p.data[idx] += 1e-6;
            let mut m = logits.clone();
            m.data[idx] -= 1e-6;
            let fd = (cross_entropy_batch(&p, &labels).unwrap().0 - cross_entropy_batch(&m, &labels).unwrap().0) / 2e-6;
            assert!((fd - g.data[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn invalid_config() {
        let cfg = TrainPhaseConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}

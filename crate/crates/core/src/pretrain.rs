//! Contrastive pretraining with the NT-Xent objective.
//!
//! Rows `2i` and `2i + 1` of a projection batch are two views of the same
//! image. For every anchor the loss is the negative log-softmax of its
//! positive's similarity against all other `2B - 1` rows (the positive plus
//! `2B - 2` negatives), with cosine similarities divided by the temperature.
//! Self-similarity is excluded. The batch loss is the mean over `2B` anchors.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_policy_float, AugmentationPolicy};
use crate::error::{Error, Result};
use crate::image::ImageSet;
use crate::linalg::{gemm, Matrix};
use crate::model::{cosine_lr, InputBatch, ModelState};
use crate::seed::Rng;

const UNIT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContrastiveConfig {
    pub epochs: usize,
    pub temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of `learning_rate`.
    pub lr_floor: f64,
    pub policy: AugmentationPolicy,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            temperature: 0.5,
            batch_size: 128,
            learning_rate: 0.1,
            lr_floor: 0.0,
            policy: AugmentationPolicy::default(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("pretrain.temperature", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("pretrain.batch_size", "a batch needs at least one negative (>= 2)"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("pretrain.learning_rate", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::config("pretrain.lr_floor", "must lie in [0, 1]"));
        }
        self.policy.validate()
    }
}

fn check_projections(z: &Matrix, temperature: f64) -> Result<()> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Contract(format!("temperature must be positive, got {temperature}")));
    }
    if z.rows % 2 != 0 {
        return Err(Error::Contract(format!("{} projection rows cannot form view pairs", z.rows)));
    }
    if z.rows < 4 {
        return Err(Error::Contract("no negatives available: need B >= 2 view pairs".into()));
    }
    for r in 0..z.rows {
        let norm = z.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Contract(format!("projection row {r} has norm {norm}, expected 1")));
        }
    }
    Ok(())
}

pub fn nt_xent_loss(projections: &Matrix, temperature: f64) -> Result<f64> {
    nt_xent_loss_and_grad(projections, temperature).map(|(l, _)| l)
}

/// Loss and its gradient with respect to the (normalized) projections.
pub fn nt_xent_loss_and_grad(z: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    check_projections(z, temperature)?;
    let n = z.rows;
    let d = z.cols;
    let mut sim = vec![0.0; n * n];
    gemm(n, d, n, &z.data, false, &z.data, true, &mut sim, 0.0);

    let scale = 1.0 / (temperature * n as f64);
    let mut coeff = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let pos = i ^ 1;
        let row = &sim[i * n..(i + 1) * n];
        let max = (0..n).filter(|&k| k != i).map(|k| row[k] / temperature).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).filter(|&k| k != i).map(|k| (row[k] / temperature - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[pos] / temperature;
        for k in (0..n).filter(|&k| k != i) {
            let p = (row[k] / temperature - lse).exp();
            coeff[i * n + k] = (p - if k == pos { 1.0 } else { 0.0 }) * scale;
        }
    }
    // ∂L/∂z_i = Σ_k (G_ik + G_ki) z_k
    let mut sym = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            sym[i * n + k] = coeff[i * n + k] + coeff[k * n + i];
        }
    }
    let mut grad = Matrix::zeros(n, d);
    gemm(n, n, d, &sym, false, &z.data, false, &mut grad.data, 0.0);
    Ok((total / n as f64, grad))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Trains encoder and projection head on augmented view pairs. Only images
/// are accepted, so labels cannot influence this phase.
pub fn pretrain(
    state: &mut ModelState,
    images: &ImageSet,
    config: &ContrastiveConfig,
    rng: &mut Rng,
) -> Result<PretrainLog> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Contract("pretraining needs a non-empty image set".into()));
    }
    let mut log = PretrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    let input = state.spec().encoder.input;
    let shape = images.shape();
    let produced = config.policy.output_size.unwrap_or((shape.height, shape.width));
    if (input.height, input.width) != produced {
        return Err(Error::config(
            "pretrain.policy.output_size",
            format!("views of {produced:?} do not match encoder input {input}"),
        ));
    }
    state.reset_optimizer();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.epochs, config.lr_floor);
        order.shuffle(rng);
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let mut views = Vec::with_capacity(2 * chunk.len());
            for &i in chunk {
                views.push(apply_policy_float(images.get(i), &config.policy, rng)?);
                views.push(apply_policy_float(images.get(i), &config.policy, rng)?);
            }
            let batch = InputBatch::from_float(input, &views)?;
            let (emb, enc_tape) = state.encode_with_tape(&batch)?;
            let (z, proj_tape) = state.project_with_tape(&emb)?;
            let (loss, dz) = nt_xent_loss_and_grad(&z, config.temperature)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    phase: "pretrain".into(),
                    epoch: epoch + 1,
                    batch: b,
                    what: format!("NT-Xent loss {loss}"),
                });
            }
            let mut grads = state.zero_gradients();
            let d_emb = state.projection_backward(&emb, &proj_tape, &dz, &mut grads);
            state.encoder_backward(&enc_tape, &d_emb, &mut grads);
            state.apply_gradients(&grads, lr).map_err(|e| annotate(e, "pretrain", epoch + 1, b))?;
            weighted += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let mean = weighted / seen.max(1) as f64;
        info!("pretrain epoch {}/{}: loss {mean:.4} (lr {lr:.4})", epoch + 1, config.epochs);
        log.epoch_losses.push(mean);
        log.learning_rates.push(lr);
        state.epoch += 1;
    }
    Ok(log)
}

pub(crate) fn annotate(err: Error, phase: &str, epoch: usize, batch: usize) -> Error {
    match err {
        Error::NonFinite { what, .. } => Error::NonFinite {
            phase: phase.into(),
            epoch,
            batch,
            what,
        },
        other => other,
    }
}

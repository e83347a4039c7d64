//! Stage-scheduled pseudo-label refinement.
//!
//! Each iteration trains for a fixed number of epochs. After every stage
//! epoch the per-sample losses of the base samples against their working
//! labels are snapshotted and thresholded (`loss < θ`, strict). Samples
//! selected at every stage of the iteration form the consensus set; at the
//! end of the iteration they take the model's argmax prediction as their
//! working label, and augmented copies of them are appended to the training
//! set. All other samples keep their current working label.

mod pipeline;

use log::info;
use serde::{Deserialize, Serialize};

pub use pipeline::{run_pipeline, EpochLogRow, PipelineConfig, PipelineOutcome, PipelinePayload, RefineConfig, Resume};

use crate::augment::{apply_policy, AugmentationPolicy};
use crate::datasets::LabeledImageDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{cosine_lr, ModelState};
use crate::seed::Rng;
use crate::trainer::{per_sample_losses, predict, train_epoch, EpochStats, TrainPhaseConfig, TrainView};

/// Epoch layout of one iteration. Epochs are 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationSchedule {
    pub iteration_epochs: usize,
    pub stage_epochs: Vec<usize>,
}

/// Per-iteration schedules; iterations past the end reuse the last entry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePlan {
    pub schedule: Vec<IterationSchedule>,
}

impl Default for StagePlan {
    /// Iteration 1 snapshots epochs 2, 3 and 4 of 4; later iterations
    /// snapshot epochs 2, 5 and 7 of 7.
    fn default() -> Self {
        Self {
            schedule: vec![
                IterationSchedule {
                    iteration_epochs: 4,
                    stage_epochs: vec![2, 3, 4],
                },
                IterationSchedule {
                    iteration_epochs: 7,
                    stage_epochs: vec![2, 5, 7],
                },
            ],
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::config("stage_plan.schedule", "needs at least one iteration schedule"));
        }
        for (i, s) in self.schedule.iter().enumerate() {
            let field = format!("stage_plan.schedule[{i}]");
            if s.stage_epochs.is_empty() {
                return Err(Error::config(field, "at least one stage per iteration"));
            }
            if s.stage_epochs.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::config(field, "stage epochs must be strictly increasing"));
            }
            if s.stage_epochs[0] == 0 || *s.stage_epochs.last().unwrap() > s.iteration_epochs {
                return Err(Error::config(field, "stage epochs must lie in [1, iteration_epochs]"));
            }
        }
        Ok(())
    }

    /// Schedule for 1-based `iteration`.
    pub fn for_iteration(&self, iteration: usize) -> &IterationSchedule {
        let idx = iteration.max(1).min(self.schedule.len()) - 1;
        &self.schedule[idx]
    }

    /// Epochs in iterations `1..iteration` (exclusive).
    pub fn epochs_before(&self, iteration: usize) -> usize {
        (1..iteration).map(|k| self.for_iteration(k).iteration_epochs).sum()
    }

    pub fn total_epochs(&self, iterations: usize) -> usize {
        self.epochs_before(iterations + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub iteration: usize,
    pub stage_epoch: usize,
    pub mask: Vec<bool>,
    pub selected: usize,
}

/// Append-only record of every stage selection, ordered by (iteration, stage epoch).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionLedger {
    pub threshold: f64,
    records: Vec<StageRecord>,
}

impl SelectionLedger {
    pub fn new(threshold: f64) -> Self {
        Self {
            threshold,
            records: Vec::new(),
        }
    }

    fn position(&self, iteration: usize, stage_epoch: usize) -> std::result::Result<usize, usize> {
        self.records
            .binary_search_by_key(&(iteration, stage_epoch), |r| (r.iteration, r.stage_epoch))
    }

    pub fn get(&self, iteration: usize, stage_epoch: usize) -> Option<&StageRecord> {
        self.position(iteration, stage_epoch).ok().map(|i| &self.records[i])
    }

    /// Records of one iteration in stage order.
    pub fn stages(&self, iteration: usize) -> impl Iterator<Item = &StageRecord> {
        self.records.iter().filter(move |r| r.iteration == iteration)
    }

    pub fn records(&self) -> &[StageRecord] {
        &self.records
    }
}

/// Thresholds `losses` (strictly below `threshold`) and stores the mask.
pub fn record_stage(
    ledger: &mut SelectionLedger,
    iteration: usize,
    stage_epoch: usize,
    losses: &[f64],
    threshold: f64,
) -> Result<usize> {
    let Err(slot) = ledger.position(iteration, stage_epoch) else {
        return Err(Error::Integrity(format!(
            "stage (iteration {iteration}, epoch {stage_epoch}) already recorded"
        )));
    };
    if let Some(first) = ledger.records.first() {
        if first.mask.len() != losses.len() {
            return Err(Error::Integrity(format!(
                "stage covers {} samples, earlier stages covered {}",
                losses.len(),
                first.mask.len()
            )));
        }
    }
    ledger.threshold = threshold;
    let mask: Vec<bool> = losses.iter().map(|&l| l < threshold).collect();
    let selected = mask.iter().filter(|&&m| m).count();
    info!("iteration {iteration} stage epoch {stage_epoch}: {selected}/{} below θ={threshold}", losses.len());
    ledger.records.insert(
        slot,
        StageRecord {
            iteration,
            stage_epoch,
            mask,
            selected,
        },
    );
    Ok(selected)
}

/// Indices selected at every listed stage of `iteration`.
pub fn consensus(ledger: &SelectionLedger, iteration: usize, stage_epochs: &[usize]) -> Result<Vec<usize>> {
    if stage_epochs.is_empty() {
        return Err(Error::Contract("consensus needs at least one stage".into()));
    }
    let mut masks = Vec::with_capacity(stage_epochs.len());
    for &e in stage_epochs {
        let rec = ledger.get(iteration, e).ok_or_else(|| {
            Error::Contract(format!("missing stage mask for iteration {iteration}, epoch {e}"))
        })?;
        masks.push(&rec.mask);
    }
    let n = masks[0].len();
    Ok((0..n).filter(|&i| masks.iter().all(|m| m[i])).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Pseudo { iteration: usize },
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::Original => write!(f, "original"),
            Provenance::Pseudo { iteration } => write!(f, "pseudo({iteration})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectedSample {
    pub source_index: usize,
    pub source_id: u64,
    pub image: Image,
    pub label: usize,
    pub iteration: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub consensus: Vec<usize>,
    pub labels_before: Vec<usize>,
    pub labels_after: Vec<usize>,
    pub predictions: Vec<usize>,
    pub injected_total: usize,
    pub epochs: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementState {
    /// Last completed iteration (0 before the first).
    pub iteration: usize,
    pub provenance: Vec<Provenance>,
    pub injected: Vec<InjectedSample>,
    pub ledger: SelectionLedger,
    pub history: Vec<IterationRecord>,
}

impl RefinementState {
    pub fn new(num_samples: usize, threshold: f64) -> Self {
        Self {
            iteration: 0,
            provenance: vec![Provenance::Original; num_samples],
            injected: Vec::new(),
            ledger: SelectionLedger::new(threshold),
            history: Vec::new(),
        }
    }

    pub fn record(&self, iteration: usize) -> Option<&IterationRecord> {
        self.history.iter().find(|r| r.iteration == iteration)
    }
}

/// Replaces the working label of every consensus sample with its prediction.
pub fn assign_pseudo_labels(
    dataset: &mut LabeledImageDataset,
    state: &mut RefinementState,
    iteration: usize,
    consensus_ids: &[usize],
    predictions: &[usize],
) -> Result<()> {
    let n = dataset.len();
    if predictions.len() != n {
        return Err(Error::Contract(format!("{} predictions for {n} samples", predictions.len())));
    }
    if let Some(&i) = consensus_ids.iter().find(|&&i| i >= n) {
        return Err(Error::Contract(format!("consensus id {i} outside [0, {n})")));
    }
    let k = dataset.num_classes();
    for &i in consensus_ids {
        let label = predictions[i];
        if label >= k {
            return Err(Error::Contract(format!("prediction {label} for sample {i} outside [0, {k})")));
        }
        dataset.set_working_label(i, label);
        state.provenance[i] = Provenance::Pseudo { iteration };
    }
    // Earlier copies follow their source's current label.
    for s in &mut state.injected {
        s.label = dataset.working_labels()[s.source_index];
    }
    Ok(())
}

/// Appends `copies_per_sample` strongly augmented copies of each consensus
/// sample, carrying its current working label.
pub fn augment_and_inject(
    dataset: &LabeledImageDataset,
    state: &mut RefinementState,
    iteration: usize,
    consensus_ids: &[usize],
    policy: &AugmentationPolicy,
    copies_per_sample: usize,
    rng: &mut Rng,
) -> Result<usize> {
    let before = state.injected.len();
    for &i in consensus_ids {
        for _ in 0..copies_per_sample {
            let image = apply_policy(dataset.images.get(i), policy, rng)?;
            state.injected.push(InjectedSample {
                source_index: i,
                source_id: dataset.sample_ids()[i],
                image,
                label: dataset.working_labels()[i],
                iteration,
            });
        }
    }
    Ok(state.injected.len() - before)
}

/// Everything one iteration needs besides the mutable state.
pub struct IterationContext<'a> {
    pub plan: &'a StagePlan,
    pub train: &'a TrainPhaseConfig,
    pub refine: &'a RefineConfig,
    /// Policy used for injected copies.
    pub policy: &'a AugmentationPolicy,
    /// Total iterations in the run, for the learning-rate schedule.
    pub iterations: usize,
}

/// Trains one iteration, snapshots its stages, then relabels and injects.
pub fn run_iteration(
    model: &mut ModelState,
    dataset: &mut LabeledImageDataset,
    state: &mut RefinementState,
    ctx: &IterationContext<'_>,
    iteration: usize,
    rng: &mut Rng,
) -> Result<IterationRecord> {
    if iteration != state.iteration + 1 {
        return Err(Error::Contract(format!(
            "iteration {iteration} requested after iteration {}",
            state.iteration
        )));
    }
    let schedule = ctx.plan.for_iteration(iteration).clone();
    let threshold = ctx.train.loss_threshold;
    let offset = ctx.plan.epochs_before(iteration);
    let total = ctx.plan.total_epochs(ctx.iterations);
    let mut epochs = Vec::with_capacity(schedule.iteration_epochs);
    for epoch in 1..=schedule.iteration_epochs {
        let lr = cosine_lr(ctx.train.learning_rate, offset + epoch - 1, total, ctx.train.lr_floor);
        let stats = {
            let view = TrainView {
                images: &dataset.images,
                labels: dataset.working_labels(),
                extra: state.injected.iter().map(|s| (&s.image, s.label)).collect(),
            };
            train_epoch(model, &view, ctx.train, lr, rng, &format!("iteration-{iteration}"))?
        };
        info!(
            "iteration {iteration} epoch {epoch}/{}: loss {:.4} over {} samples",
            schedule.iteration_epochs, stats.mean_loss, stats.sample_count
        );
        epochs.push(stats);
        if schedule.stage_epochs.contains(&epoch) {
            let losses = per_sample_losses(model, dataset, ctx.train.eval_batch)?;
            record_stage(&mut state.ledger, iteration, epoch, &losses, threshold)?;
        }
    }

    let selected = consensus(&state.ledger, iteration, &schedule.stage_epochs)?;
    let predictions = predict(model, &dataset.images, ctx.train.eval_batch)?;
    let labels_before = dataset.working_labels().to_vec();
    if ctx.refine.revert_unselected {
        let mut reverted = dataset.noisy_labels().to_vec();
        for &i in &selected {
            reverted[i] = labels_before[i];
        }
        for (i, p) in state.provenance.iter_mut().enumerate() {
            if reverted[i] != labels_before[i] {
                *p = Provenance::Original;
            }
        }
        dataset.replace_working_labels(reverted)?;
    }
    assign_pseudo_labels(dataset, state, iteration, &selected, &predictions)?;
    augment_and_inject(
        dataset,
        state,
        iteration,
        &selected,
        ctx.policy,
        ctx.refine.copies_per_sample,
        rng,
    )?;
    info!(
        "iteration {iteration}: consensus {} samples, registry now {}",
        selected.len(),
        state.injected.len()
    );
    let record = IterationRecord {
        iteration,
        consensus: selected,
        labels_before,
        labels_after: dataset.working_labels().to_vec(),
        predictions,
        injected_total: state.injected.len(),
        epochs,
    };
    state.history.push(record.clone());
    state.iteration = iteration;
    Ok(record)
}

/// Per-iteration audit rows: sample id, stage masks, consensus flag, old
/// label, new label and provenance.
pub fn write_audit(
    path: &std::path::Path,
    dataset: &LabeledImageDataset,
    state: &RefinementState,
    iteration: usize,
) -> Result<()> {
    use std::io::Write;
    let record = state
        .record(iteration)
        .ok_or_else(|| Error::Contract(format!("iteration {iteration} has not run")))?;
    let stages: Vec<&StageRecord> = state.ledger.stages(iteration).collect();
    let mut in_consensus = vec![false; dataset.len()];
    for &i in &record.consensus {
        in_consensus[i] = true;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        write!(w, "sample_id")?;
        for s in &stages {
            write!(w, ",stage_{}", s.stage_epoch)?;
        }
        writeln!(w, ",consensus,old_label,new_label,provenance")?;
        for i in 0..dataset.len() {
            write!(w, "{}", dataset.sample_ids()[i])?;
            for s in &stages {
                write!(w, ",{}", s.mask[i] as u8)?;
            }
            let prov = if in_consensus[i] {
                Provenance::Pseudo { iteration }.to_string()
            } else {
                "retained".to_string()
            };
            writeln!(
                w,
                ",{},{},{},{}",
                in_consensus[i] as u8, record.labels_before[i], record.labels_after[i], prov
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

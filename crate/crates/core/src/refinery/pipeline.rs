//! Pretrain, warmup and refinement iterations end to end, with per-phase
//! checkpoints and resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{run_iteration, write_audit, IterationContext, RefinementState, StagePlan};
use crate::augment::AugmentationPolicy;
use crate::datasets::LabeledImageDataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy, label_quality, write_quality_csv, MetricsReport, QualityRow};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelSpec, ModelState, SgdConfig};
use crate::pretrain::{pretrain, ContrastiveConfig};
use crate::seed::{derive_seed, fnv1a64, rng_for};
use crate::trainer::{warmup, TrainPhaseConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    pub copies_per_sample: usize,
    /// Policy for injected copies; `None` reuses the contrastive policy.
    pub policy: Option<AugmentationPolicy>,
    /// Reset non-consensus samples to their noisy label before relabeling
    /// instead of keeping their current working label.
    pub revert_unselected: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            copies_per_sample: 1,
            policy: None,
            revert_unselected: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub sgd: SgdConfig,
    pub contrastive: ContrastiveConfig,
    pub train: TrainPhaseConfig,
    pub plan: StagePlan,
    pub iterations: usize,
    pub refine: RefineConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.contrastive.validate()?;
        self.train.validate()?;
        self.plan.validate()?;
        let input = self.model.encoder.input;
        let size = Some((input.height, input.width));
        if self.contrastive.policy.output_size.is_some_and(|s| Some(s) != size) {
            return Err(Error::config("contrastive.policy.output_size", format!("must equal the model input {input}")));
        }
        if let Some(p) = &self.refine.policy {
            p.validate()?;
            if p.output_size.is_some_and(|s| Some(s) != size) {
                return Err(Error::config("refine.policy.output_size", format!("must equal the model input {input}")));
            }
        }
        Ok(())
    }

    fn injection_policy(&self) -> &AugmentationPolicy {
        self.refine.policy.as_ref().unwrap_or(&self.contrastive.policy)
    }
}

/// One supervised epoch in the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLogRow {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
    pub sample_count: usize,
}

/// Bookkeeping stored beside the model in every pipeline checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelinePayload {
    /// Fingerprint of the noisy label track the run was started on.
    pub noisy_label_hash: u64,
    pub pretrain_losses: Vec<f64>,
    pub warmup_test_accuracy: Option<f64>,
    pub epoch_log: Vec<EpochLogRow>,
    pub refinement: Option<RefinementState>,
}

pub enum Resume {
    Fresh,
    /// Continue after the phase stored in this checkpoint file.
    From(PathBuf),
}

pub struct PipelineOutcome {
    pub model: ModelState,
    pub state: RefinementState,
    pub initial_labels: Vec<usize>,
    pub pretrain_losses: Vec<f64>,
    pub epoch_log: Vec<EpochLogRow>,
    pub warmup_test_accuracy: f64,
    pub test_accuracy: f64,
    pub quality: Vec<QualityRow>,
}

impl PipelineOutcome {
    pub fn report(&self, dataset: &str, noise_rate: f64, seed: u64) -> MetricsReport {
        MetricsReport {
            dataset: dataset.to_string(),
            noise_rate,
            method: "refine".to_string(),
            seed,
            test_accuracy: self.test_accuracy,
            warmup_test_accuracy: Some(self.warmup_test_accuracy),
            quality: self.quality.clone(),
        }
    }
}

fn label_hash(labels: &[usize]) -> u64 {
    let bytes: Vec<u8> = labels.iter().flat_map(|&l| (l as u64).to_le_bytes()).collect();
    fnv1a64(&bytes)
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Done {
    Nothing,
    Pretrain,
    Warmup,
    Iteration(usize),
}

fn parse_phase(tag: &str) -> Result<Done> {
    match tag {
        "pretrain" => Ok(Done::Pretrain),
        "warmup" => Ok(Done::Warmup),
        t => t
            .strip_prefix("iter")
            .and_then(|k| k.parse().ok())
            .filter(|&k: &usize| k >= 1)
            .map(Done::Iteration)
            .ok_or_else(|| Error::Version(format!("unknown checkpoint phase `{t}`"))),
    }
}

struct Outputs<'a> {
    dir: Option<&'a Path>,
}

impl Outputs<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.map(|d| d.join(name))
    }

    fn checkpoint(&self, phase: &str, model: &ModelState, payload: &PipelinePayload) -> Result<()> {
        let Some(path) = self.path(&format!("{phase}.ckpt")) else {
            return Ok(());
        };
        let payload = serde_json::to_value(payload).map_err(|e| Error::Integrity(e.to_string()))?;
        save_checkpoint(
            &path,
            &Checkpoint {
                phase: phase.to_string(),
                model: model.clone(),
                payload,
            },
        )
    }

    fn text(&self, name: &str, body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let Some(path) = self.path(name) else {
            return Ok(());
        };
        let run = || -> std::io::Result<()> {
            let mut w = std::io::BufWriter::new(std::fs::File::create(&path)?);
            body(&mut w)?;
            w.flush()
        };
        run().map_err(|e| Error::io(&path, e))
    }
}

/// Runs every phase not already covered by `resume`. `train` must carry its
/// noisy labels; its working track is rewritten by the run. When `out_dir` is
/// given, checkpoints, loss logs, audits and quality tables are written there.
pub fn run_pipeline(
    config: &PipelineConfig,
    train: &mut LabeledImageDataset,
    test: &LabeledImageDataset,
    out_dir: Option<&Path>,
    resume: Resume,
) -> Result<PipelineOutcome> {
    config.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let out = Outputs { dir: out_dir };
    let noisy = train.noisy_labels().to_vec();
    let n = train.len();

    let (mut model, mut payload, done) = match resume {
        Resume::Fresh => {
            let model = ModelState::new(config.model.clone(), config.sgd.clone(), derive_seed(config.seed, "model-init"))?;
            let payload = PipelinePayload {
                noisy_label_hash: label_hash(&noisy),
                pretrain_losses: Vec::new(),
                warmup_test_accuracy: None,
                epoch_log: Vec::new(),
                refinement: None,
            };
            (model, payload, Done::Nothing)
        }
        Resume::From(path) => {
            let ckpt = load_checkpoint(&path)?;
            if ckpt.model.spec() != &config.model {
                return Err(Error::Version(format!(
                    "{}: checkpoint model shape does not match the configured model",
                    path.display()
                )));
            }
            let done = parse_phase(&ckpt.phase)?;
            let payload: PipelinePayload = serde_json::from_value(ckpt.payload)
                .map_err(|e| Error::Version(format!("{}: unreadable pipeline payload: {e}", path.display())))?;
            if payload.noisy_label_hash != label_hash(&noisy) {
                return Err(Error::Integrity(format!(
                    "{} was produced from different noisy labels",
                    path.display()
                )));
            }
            info!("resuming after phase {}", ckpt.phase);
            (ckpt.model, payload, done)
        }
    };

    // Working labels at the resume point.
    let mut state = payload.refinement.clone().unwrap_or_else(|| RefinementState::new(n, config.train.loss_threshold));
    let labels = state.history.last().map_or_else(|| noisy.clone(), |r| r.labels_after.clone());
    if state.provenance.len() != n || state.injected.iter().any(|s| s.image.shape != train.images.shape() || s.image.data.len() != s.image.shape.len()) {
        return Err(Error::Integrity("checkpointed refinement state does not fit the dataset".into()));
    }
    train.replace_working_labels(labels)?;
    if let Done::Iteration(k) = done {
        if state.iteration != k {
            return Err(Error::Integrity(format!("checkpoint tagged iter{k} holds iteration {}", state.iteration)));
        }
    }

    if done < Done::Pretrain {
        let mut rng = rng_for(config.seed, "pretrain");
        let log = pretrain(&mut model, &train.images, &config.contrastive, &mut rng).map_err(|e| e.in_phase("pretrain"))?;
        payload.pretrain_losses = log.epoch_losses.clone();
        out.checkpoint("pretrain", &model, &payload)?;
    }
    out.text("pretrain_loss.csv", |w| {
        writeln!(w, "epoch,loss")?;
        for (e, l) in payload.pretrain_losses.iter().enumerate() {
            writeln!(w, "{},{l}", e + 1)?;
        }
        Ok(())
    })?;

    if done < Done::Warmup {
        let mut rng = rng_for(config.seed, "warmup");
        let stats = warmup(&mut model, train, &config.train, &mut rng).map_err(|e| e.in_phase("warmup"))?;
        let first = model.epoch - stats.len();
        for (i, s) in stats.iter().enumerate() {
            payload.epoch_log.push(EpochLogRow {
                phase: "warmup".into(),
                epoch: first + i + 1,
                mean_loss: s.mean_loss,
                learning_rate: s.learning_rate,
                sample_count: s.sample_count,
            });
        }
        let acc = accuracy(&model, test, config.train.eval_batch).map_err(|e| e.in_phase("warmup"))?;
        info!("warmup test accuracy {acc:.4}");
        payload.warmup_test_accuracy = Some(acc);
        out.checkpoint("warmup", &model, &payload)?;
    }
    let warmup_test_accuracy = payload
        .warmup_test_accuracy
        .ok_or_else(|| Error::Integrity("checkpoint lacks the warmup accuracy".into()))?;

    let start = match done {
        Done::Iteration(k) => k + 1,
        _ => 1,
    };
    let ctx = IterationContext {
        plan: &config.plan,
        train: &config.train,
        refine: &config.refine,
        policy: config.injection_policy(),
        iterations: config.iterations,
    };
    for k in start..=config.iterations {
        let phase = format!("iter{k}");
        let mut rng = rng_for(config.seed, &format!("iteration-{k}"));
        let first = model.epoch;
        let record = run_iteration(&mut model, train, &mut state, &ctx, k, &mut rng).map_err(|e| e.in_phase(&phase))?;
        for (i, s) in record.epochs.iter().enumerate() {
            payload.epoch_log.push(EpochLogRow {
                phase: phase.clone(),
                epoch: first + i + 1,
                mean_loss: s.mean_loss,
                learning_rate: s.learning_rate,
                sample_count: s.sample_count,
            });
        }
        payload.refinement = Some(state.clone());
        out.checkpoint(&phase, &model, &payload)?;
        if let Some(path) = out.path(&format!("{phase}_audit.csv")) {
            write_audit(&path, train, &state, k)?;
        }
    }

    out.text("epochs.csv", |w| {
        writeln!(w, "epoch,phase,loss,lr,count")?;
        for r in &payload.epoch_log {
            writeln!(w, "{},{},{},{},{}", r.epoch, r.phase, r.mean_loss, r.learning_rate, r.sample_count)?;
        }
        Ok(())
    })?;

    let test_accuracy = accuracy(&model, test, config.train.eval_batch)?;
    info!("final test accuracy {test_accuracy:.4}");
    let quality = label_quality(&state, &noisy, Some(&train.oracle()))?;
    if let Some(path) = out.path("quality.csv") {
        write_quality_csv(&path, &quality)?;
    }
    Ok(PipelineOutcome {
        model,
        state,
        initial_labels: noisy,
        pretrain_losses: payload.pretrain_losses,
        epoch_log: payload.epoch_log,
        warmup_test_accuracy,
        test_accuracy,
        quality,
    })
}

use std::path::Path;

use noisyrefine::config::{ModelSection, RunConfig};
use noisyrefine::datasets::{BlobsConfig, LabeledImageDataset};
use noisyrefine::image::ImageSet;
use noisyrefine::model::load_checkpoint;
use noisyrefine::refinery::{run_pipeline, IterationSchedule, PipelineOutcome, Resume, StagePlan};
use noisyrefine::Error;

fn small_config(seed: u64, iterations: usize) -> RunConfig {
    let mut cfg = RunConfig::toy(seed, "unused");
    cfg.dataset.blobs = BlobsConfig {
        train_size: 120,
        test_size: 60,
        ..BlobsConfig::default()
    };
    cfg.model = ModelSection { preset: "mlp".into() };
    cfg.contrastive.epochs = 2;
    cfg.contrastive.batch_size = 32;
    cfg.train.warmup_epochs = 2;
    cfg.train.batch_size = 32;
    cfg.stage_plan = StagePlan {
        schedule: vec![IterationSchedule {
            iteration_epochs: 3,
            stage_epochs: vec![1, 3],
        }],
    };
    cfg.iterations = iterations;
    cfg
}

fn run(cfg: &RunConfig, out: Option<&Path>, resume: Resume) -> noisyrefine::Result<PipelineOutcome> {
    let mut data = cfg.prepare()?;
    let pc = cfg.pipeline_config(&data.train)?;
    run_pipeline(&pc, &mut data.train, &data.test, out, resume)
}

fn final_labels(o: &PipelineOutcome) -> Vec<usize> {
    o.state.history.last().map_or_else(|| o.initial_labels.clone(), |r| r.labels_after.clone())
}

#[test]
fn same_seed_same_run() {
    let cfg = small_config(11, 2);
    let a = run(&cfg, None, Resume::Fresh).unwrap();
    let b = run(&cfg, None, Resume::Fresh).unwrap();
    assert_eq!(final_labels(&a), final_labels(&b));
    assert_eq!(a.test_accuracy, b.test_accuracy);
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.state, b.state);
    let c = run(&small_config(12, 2), None, Resume::Fresh).unwrap();
    assert_ne!(a.model.params(), c.model.params());
}

#[test]
fn outputs_and_resume_match_a_full_run() {
    let cfg = small_config(5, 3);
    let full_dir = tempfile::tempdir().unwrap();
    let full = run(&cfg, Some(full_dir.path()), Resume::Fresh).unwrap();
    for name in [
        "pretrain.ckpt",
        "warmup.ckpt",
        "iter1.ckpt",
        "iter2.ckpt",
        "iter3.ckpt",
        "iter1_audit.csv",
        "iter3_audit.csv",
        "pretrain_loss.csv",
        "epochs.csv",
        "quality.csv",
    ] {
        assert!(full_dir.path().join(name).exists(), "{name} missing");
    }
    assert_eq!(full.state.history.len(), 3);
    assert_eq!(full.quality.len(), 4);
    let audit = std::fs::read_to_string(full_dir.path().join("iter1_audit.csv")).unwrap();
    assert_eq!(audit.lines().next().unwrap(), "sample_id,stage_1,stage_3,consensus,old_label,new_label,provenance");
    assert_eq!(audit.lines().count(), 121);

    for phase in ["pretrain", "warmup", "iter1", "iter2"] {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = full_dir.path().join(format!("{phase}.ckpt"));
        let resumed = run(&cfg, Some(dir.path()), Resume::From(ckpt)).unwrap();
        assert_eq!(resumed.model.params(), full.model.params(), "resume after {phase}");
        assert_eq!(resumed.model.optimizer().velocity, full.model.optimizer().velocity);
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.test_accuracy, full.test_accuracy);
        assert_eq!(resumed.epoch_log, full.epoch_log);
        for name in ["epochs.csv", "quality.csv", "iter3_audit.csv", "pretrain_loss.csv"] {
            let a = std::fs::read(full_dir.path().join(name)).unwrap();
            let b = std::fs::read(dir.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs after resuming from {phase}");
        }
        // Only later phases are rewritten.
        if phase == "iter2" {
            assert!(!dir.path().join("iter1.ckpt").exists());
            assert!(dir.path().join("iter3.ckpt").exists());
        }
    }

    let ckpt = load_checkpoint(&full_dir.path().join("iter2.ckpt")).unwrap();
    assert_eq!(ckpt.phase, "iter2");
    assert!(ckpt.payload["refinement"]["iteration"] == 2);
}

#[test]
fn zero_iterations_stops_after_warmup() {
    let cfg = small_config(3, 0);
    let dir = tempfile::tempdir().unwrap();
    let out = run(&cfg, Some(dir.path()), Resume::Fresh).unwrap();
    assert!(out.state.history.is_empty());
    assert_eq!(out.test_accuracy, out.warmup_test_accuracy);
    assert_eq!(out.quality.len(), 1);
    assert!(dir.path().join("warmup.ckpt").exists());
    assert!(!dir.path().join("iter1.ckpt").exists());
    assert_eq!(out.epoch_log.len(), 2);
}

#[test]
fn mismatched_checkpoints_are_rejected() {
    let cfg = small_config(9, 1);
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, Some(dir.path()), Resume::Fresh).unwrap();
    let ckpt = dir.path().join("warmup.ckpt");

    let mut other_model = cfg.clone();
    other_model.model.preset = "tiny".into();
    let err = run(&other_model, None, Resume::From(ckpt.clone())).err().unwrap();
    assert!(matches!(err, Error::Version(_)), "{err}");

    let other_noise = small_config(10, 1);
    let err = run(&other_noise, None, Resume::From(ckpt)).err().unwrap();
    assert!(matches!(err, Error::Integrity(_)), "{err}");

    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert!(matches!(run(&cfg, None, Resume::From(garbage)), Err(Error::Version(_))));
}

#[test]
fn phase_failures_carry_their_phase() {
    let cfg = small_config(2, 1);
    let mut data = cfg.prepare().unwrap();
    let pc = cfg.pipeline_config(&data.train).unwrap();
    let shape = data.train.images.shape();
    let empty = LabeledImageDataset::new(ImageSet::new(shape, Vec::new()), Vec::new(), 3).unwrap();
    let err = run_pipeline(&pc, &mut data.train, &empty, None, Resume::Fresh).err().unwrap();
    match &err {
        Error::Phase { phase, source } => {
            assert_eq!(phase, "warmup");
            assert!(matches!(**source, Error::Contract(_)));
        }
        other => panic!("unexpected {other}"),
    }
    assert!(err.to_string().starts_with("warmup phase aborted"));
}

//! TOML run configuration shared by the command-line tool and the bindings.
//!
//! The master seed fans out to every random stream through
//! [`derive_seed`]: `idn` for the noise generator, `model-init`, `pretrain`,
//! `warmup` and `iteration-{k}` for training. The blobs generator keeps its
//! own seed so the toy dataset stays fixed while the run seed varies.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{generate_blobs, inject_idn, load_cifar, BlobsConfig, CifarKind, DatasetVariant, FlipLedger, IdnSpec, LabeledImageDataset, Split};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, SgdConfig};
use crate::pretrain::ContrastiveConfig;
use crate::refinery::{PipelineConfig, RefineConfig, StagePlan};
use crate::seed::derive_seed;
use crate::trainer::TrainPhaseConfig;

/// Environment variable naming the dataset cache directory.
pub const DATA_DIR_ENV: &str = "NOISYREFINE_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// `cifar10`, `cifar100` or `blobs`.
    #[serde(default = "default_variant")]
    pub variant: String,
    /// Dataset root; falls back to the cache directory in the environment.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub blobs: BlobsConfig,
}

fn default_variant() -> String {
    "blobs".into()
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            variant: default_variant(),
            path: None,
            blobs: BlobsConfig::default(),
        }
    }
}

/// Noise settings; the generator seed is derived from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub target_rate: f64,
    pub rate_spread: f64,
    pub feature_projection_dim: usize,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let d = IdnSpec::default();
        Self {
            target_rate: d.target_rate,
            rate_spread: d.rate_spread,
            feature_projection_dim: d.feature_projection_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `tiny`, `small`, `resnet18` or `mlp`.
    pub preset: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { preset: "small".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default)]
    pub contrastive: ContrastiveConfig,
    #[serde(default)]
    pub train: TrainPhaseConfig,
    #[serde(default)]
    pub stage_plan: StagePlan,
    #[serde(default)]
    pub refine: RefineConfig,
}

fn default_iterations() -> usize {
    4
}

/// A training split with noise applied, its ledger and the clean test split.
pub struct PreparedData {
    pub train: LabeledImageDataset,
    pub test: LabeledImageDataset,
    pub ledger: FlipLedger,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map_or_else(String::new, |s| format!("line {}", text[..s.start].matches('\n').count() + 1));
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.variant()?;
        self.idn_spec().validate()?;
        self.contrastive.validate()?;
        self.train.validate()?;
        self.stage_plan.validate()?;
        self.dataset.blobs.validate()?;
        Ok(())
    }

    pub fn variant(&self) -> Result<DatasetVariant> {
        self.dataset.variant.parse()
    }

    pub fn idn_spec(&self) -> IdnSpec {
        IdnSpec {
            target_rate: self.noise.target_rate,
            seed: derive_seed(self.seed, "idn"),
            rate_spread: self.noise.rate_spread,
            feature_projection_dim: self.noise.feature_projection_dim,
        }
    }

    /// Dataset root from the config or the environment.
    pub fn data_root(&self) -> Result<PathBuf> {
        if let Some(p) = &self.dataset.path {
            return Ok(p.clone());
        }
        std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).ok_or_else(|| {
            Error::config(
                "dataset.path",
                format!("not set and {DATA_DIR_ENV} is empty; point either at the dataset cache"),
            )
        })
    }

    pub fn load_split(&self, split: Split) -> Result<LabeledImageDataset> {
        match self.variant()?.with_split(split) {
            DatasetVariant::Blobs(s) => generate_blobs(&self.dataset.blobs, s),
            DatasetVariant::Cifar10(s) => load_cifar(&self.data_root()?, CifarKind::Cifar10, s),
            DatasetVariant::Cifar100(s) => load_cifar(&self.data_root()?, CifarKind::Cifar100, s),
        }
    }

    /// Clean training and test splits, with the training split corrupted.
    pub fn prepare(&self) -> Result<PreparedData> {
        let clean = self.load_split(Split::Train)?;
        let test = self.load_split(Split::Test)?;
        let (train, ledger) = inject_idn(clean, &self.idn_spec())?;
        Ok(PreparedData { train, test, ledger })
    }

    /// Clean splits with a previously written ledger applied to training.
    pub fn prepare_from_ledger(&self, ledger: FlipLedger) -> Result<PreparedData> {
        let mut train = self.load_split(Split::Train)?;
        let test = self.load_split(Split::Test)?;
        train.apply_ledger(&ledger)?;
        Ok(PreparedData { train, test, ledger })
    }

    pub fn pipeline_config(&self, train: &LabeledImageDataset) -> Result<PipelineConfig> {
        let model = ModelSpec::preset(&self.model.preset, train.images.shape(), train.num_classes())?;
        let cfg = PipelineConfig {
            seed: self.seed,
            model,
            sgd: self.sgd.clone(),
            contrastive: self.contrastive.clone(),
            train: self.train.clone(),
            plan: self.stage_plan.clone(),
            iterations: self.iterations,
            refine: self.refine.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The configuration behind the toy acceptance runs: 3,000 8×8 images
    /// in three classes with 30% noise, the `tiny` model, 30 pretraining
    /// epochs, 5 warmup epochs and 4 refinement iterations.
    pub fn toy(seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            output_dir: output_dir.into(),
            iterations: 4,
            dataset: DatasetSection::default(),
            noise: NoiseSection {
                target_rate: 0.3,
                ..NoiseSection::default()
            },
            model: ModelSection { preset: "tiny".into() },
            sgd: SgdConfig::default(),
            contrastive: ContrastiveConfig::default(),
            train: TrainPhaseConfig::default(),
            stage_plan: StagePlan::default(),
            refine: RefineConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::toy(3, "out");
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = RunConfig::from_toml("seed = 1\noutput_dir = \"o\"\n").unwrap();
        assert_eq!(cfg.iterations, 4);
        assert_eq!(cfg.stage_plan, StagePlan::default());
        assert_eq!(cfg.contrastive.epochs, 30);
        assert_eq!(cfg.train.warmup_epochs, 5);
        assert_eq!(cfg.train.loss_threshold, 1.0);
        assert_eq!(cfg.refine.copies_per_sample, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "seed = 1\noutput_dir = \"o\"\nitterations = 3\n",
            "seed = 1\noutput_dir = \"o\"\n[train]\nwarmup_epoch = 3\n",
            "seed = 1\noutput_dir = \"o\"\n[contrastive.policy]\nblur = 1.0\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config { .. })), "{text}");
        }
    }

    #[test]
    fn invalid_values_name_the_field() {
        let err = RunConfig::from_toml("seed = 1\noutput_dir = \"o\"\n[noise]\ntarget_rate = 1.5\n").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "noise.target_rate"), "{err}");
        let err = RunConfig::from_toml("seed = 1\noutput_dir = \"o\"\n[dataset]\nvariant = \"mnist\"\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn seeds_fan_out() {
        let a = RunConfig::toy(1, "o");
        let b = RunConfig::toy(2, "o");
        assert_ne!(a.idn_spec().seed, b.idn_spec().seed);
        assert_eq!(a.idn_spec().seed, RunConfig::toy(1, "x").idn_spec().seed);
    }
}

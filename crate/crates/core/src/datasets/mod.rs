//! Dataset loading, synthetic instance-dependent noise and the three-track
//! label model (clean / noisy / working).
//!
//! Clean labels are private to this module. Training code sees only the
//! noisy and working tracks; evaluation reaches the ground truth through
//! [`LabeledImageDataset::oracle`].

mod blobs;
mod cifar;
mod idn;
mod stats;

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use blobs::{generate_blobs, BlobsConfig};
pub use cifar::{load_cifar, CifarKind};
pub use idn::{inject_idn, FlipLedger, IdnSpec};
pub use stats::{noise_statistics, NoiseReport};

use crate::error::{Error, Result};
use crate::image::ImageSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Dataset name as accepted by [`load_dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetVariant {
    Cifar10(Split),
    Cifar100(Split),
    Blobs(Split),
}

impl DatasetVariant {
    pub fn split(&self) -> Split {
        match *self {
            DatasetVariant::Cifar10(s) | DatasetVariant::Cifar100(s) | DatasetVariant::Blobs(s) => s,
        }
    }

    pub fn with_split(self, split: Split) -> Self {
        match self {
            DatasetVariant::Cifar10(_) => DatasetVariant::Cifar10(split),
            DatasetVariant::Cifar100(_) => DatasetVariant::Cifar100(split),
            DatasetVariant::Blobs(_) => DatasetVariant::Blobs(split),
        }
    }

    /// Family name without the split suffix, as used in reports.
    pub fn family(&self) -> &'static str {
        match self {
            DatasetVariant::Cifar10(_) => "cifar10",
            DatasetVariant::Cifar100(_) => "cifar100",
            DatasetVariant::Blobs(_) => "blobs",
        }
    }
}

impl FromStr for DatasetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        let (family, split) = match lower.rsplit_once('-') {
            Some((f, "test")) => (f, Split::Test),
            Some((f, "train")) => (f, Split::Train),
            _ => (lower.as_str(), Split::Train),
        };
        match family {
            "cifar10" | "cifar-10" => Ok(DatasetVariant::Cifar10(split)),
            "cifar100" | "cifar-100" => Ok(DatasetVariant::Cifar100(split)),
            "blobs" | "toy" => Ok(DatasetVariant::Blobs(split)),
            _ => Err(Error::config(
                "dataset.variant",
                format!("unknown dataset variant `{s}` (expected cifar10, cifar100 or blobs, optionally suffixed -train/-test)"),
            )),
        }
    }
}

impl std::fmt::Display for DatasetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let split = match self.split() {
            Split::Train => "train",
            Split::Test => "test",
        };
        write!(f, "{}-{}", self.family(), split)
    }
}

/// Images plus the clean, noisy and working label tracks.
#[derive(Clone, Debug)]
pub struct LabeledImageDataset {
    pub images: ImageSet,
    clean_labels: Vec<usize>,
    noisy_labels: Vec<usize>,
    working_labels: Vec<usize>,
    sample_ids: Vec<u64>,
    num_classes: usize,
}

impl LabeledImageDataset {
    /// Builds a dataset whose noisy and working tracks start equal to `labels`.
    pub fn new(images: ImageSet, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Integrity(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::config("num_classes", "need at least two classes"));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::Integrity(format!(
                "label {l} of sample {i} outside [0, {num_classes})"
            )));
        }
        let sample_ids = (0..labels.len() as u64).collect();
        Ok(Self {
            images,
            noisy_labels: labels.clone(),
            working_labels: labels.clone(),
            clean_labels: labels,
            sample_ids,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.clean_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_ids(&self) -> &[u64] {
        &self.sample_ids
    }

    pub fn noisy_labels(&self) -> &[usize] {
        &self.noisy_labels
    }

    pub fn working_labels(&self) -> &[usize] {
        &self.working_labels
    }

    /// Ground-truth access for evaluation code only.
    pub fn oracle(&self) -> LabelOracle<'_> {
        LabelOracle {
            clean: &self.clean_labels,
        }
    }

    /// Installs the noisy labels recorded in `ledger`, resetting the working
    /// track to them. The ledger's original labels must match the clean track.
    pub fn apply_ledger(&mut self, ledger: &FlipLedger) -> Result<()> {
        if ledger.len() != self.len() {
            return Err(Error::Integrity(format!(
                "ledger covers {} samples, dataset has {}",
                ledger.len(),
                self.len()
            )));
        }
        if ledger.original_label != self.clean_labels {
            return Err(Error::Integrity(
                "ledger original labels do not match the dataset's clean labels".into(),
            ));
        }
        if let Some(&l) = ledger.corrupted_label.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Integrity(format!("ledger label {l} out of range")));
        }
        self.noisy_labels = ledger.corrupted_label.clone();
        self.working_labels = ledger.corrupted_label.clone();
        Ok(())
    }

    pub(crate) fn set_working_label(&mut self, index: usize, label: usize) {
        debug_assert!(label < self.num_classes);
        self.working_labels[index] = label;
    }

    pub(crate) fn replace_working_labels(&mut self, labels: Vec<usize>) -> Result<()> {
        if labels.len() != self.len() || labels.iter().any(|&l| l >= self.num_classes) {
            return Err(Error::Integrity("working label track does not fit the dataset".into()));
        }
        self.working_labels = labels;
        Ok(())
    }

    /// Random-access subset, preserving sample ids.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let shape = self.images.shape();
        let images = ImageSet::from_images(shape, indices.iter().map(|&i| self.images.get(i).to_owned()));
        let pick = |v: &[usize]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Self {
            images,
            clean_labels: pick(&self.clean_labels),
            noisy_labels: pick(&self.noisy_labels),
            working_labels: pick(&self.working_labels),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Read-only handle on the clean labels.
#[derive(Clone, Copy, Debug)]
pub struct LabelOracle<'a> {
    clean: &'a [usize],
}

impl<'a> LabelOracle<'a> {
    pub fn clean_labels(&self) -> &'a [usize] {
        self.clean
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// Loads a dataset by variant name. `path` points at the directory holding
/// the official binary distribution; it is ignored for the synthetic `blobs`
/// variant, which uses [`BlobsConfig::default`].
pub fn load_dataset(path: &Path, variant: &str) -> Result<LabeledImageDataset> {
    let variant: DatasetVariant = variant.parse()?;
    load_variant(path, variant, &BlobsConfig::default())
}

pub fn load_variant(
    path: &Path,
    variant: DatasetVariant,
    blobs: &BlobsConfig,
) -> Result<LabeledImageDataset> {
    match variant {
        DatasetVariant::Cifar10(split) => load_cifar(path, CifarKind::Cifar10, split),
        DatasetVariant::Cifar100(split) => load_cifar(path, CifarKind::Cifar100, split),
        DatasetVariant::Blobs(split) => generate_blobs(blobs, split),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageShape;

    fn tiny() -> LabeledImageDataset {
        let images = ImageSet::new(ImageShape::new(1, 1, 1), vec![0, 1, 2, 3]);
        LabeledImageDataset::new(images, vec![0, 1, 1, 0], 2).unwrap()
    }

    #[test]
    fn tracks_start_equal() {
        let d = tiny();
        assert_eq!(d.noisy_labels(), d.oracle().clean_labels());
        assert_eq!(d.working_labels(), d.noisy_labels());
        assert_eq!(d.sample_ids(), &[0, 1, 2, 3]);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let images = ImageSet::new(ImageShape::new(1, 1, 1), vec![0, 1]);
        assert!(matches!(
            LabeledImageDataset::new(images, vec![0, 2], 2),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn variant_names() {
        assert_eq!("cifar10".parse::<DatasetVariant>().unwrap(), DatasetVariant::Cifar10(Split::Train));
        assert_eq!(
            "CIFAR100-test".parse::<DatasetVariant>().unwrap(),
            DatasetVariant::Cifar100(Split::Test)
        );
        assert_eq!("blobs".parse::<DatasetVariant>().unwrap(), DatasetVariant::Blobs(Split::Train));
        assert!(matches!(
            "imagenet".parse::<DatasetVariant>(),
            Err(Error::Config { .. })
        ));
        let v = DatasetVariant::Blobs(Split::Test);
        assert_eq!(v.to_string().parse::<DatasetVariant>().unwrap(), v);
    }

    #[test]
    fn unknown_variant_is_config_error() {
        let err = load_dataset(Path::new("/nonexistent"), "mnist").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn subset_keeps_ids() {
        let d = tiny();
        let s = d.subset(&[3, 1]);
        assert_eq!(s.sample_ids(), &[3, 1]);
        assert_eq!(s.oracle().clean_labels(), &[0, 1]);
        assert_eq!(s.images.get(0).data, &[3]);
    }
}

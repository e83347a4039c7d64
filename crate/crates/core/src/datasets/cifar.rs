//! Reader for the official CIFAR binary distributions.
//!
//! Each record is one label byte (two for CIFAR-100: coarse then fine)
//! followed by 3072 pixel bytes stored plane by plane (1024 red, 1024
//! green, 1024 blue, each row-major 32×32). Images are converted to
//! interleaved `32 × 32 × 3`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledImageDataset, Split};
use crate::error::{Error, Result};
use crate::image::{ImageSet, ImageShape};

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const PIXELS: usize = 3 * PLANE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    fn subdir(self) -> &'static str {
        match self {
            CifarKind::Cifar10 => "cifar-10-batches-bin",
            CifarKind::Cifar100 => "cifar-100-binary",
        }
    }

    fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarKind::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarKind::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarKind::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarKind::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }
}

/// Accepts either the extracted batch directory or its parent.
fn resolve_dir(root: &Path, kind: CifarKind, first_file: &str) -> PathBuf {
    let nested = root.join(kind.subdir());
    if !root.join(first_file).exists() && nested.join(first_file).exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load_cifar(root: &Path, kind: CifarKind, split: Split) -> Result<LabeledImageDataset> {
    let files = kind.files(split);
    let dir = resolve_dir(root, kind, files[0]);
    let record = kind.label_bytes() + PIXELS;
    let k = kind.num_classes();

    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in files {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::ingestion(&path, e.to_string()))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::ingestion(
                &path,
                format!(
                    "size {} is not a positive multiple of the {record}-byte record",
                    bytes.len()
                ),
            ));
        }
        labels.reserve(bytes.len() / record);
        pixels.reserve(bytes.len() / record * PIXELS);
        for (r, rec) in bytes.chunks_exact(record).enumerate() {
            // CIFAR-100 carries (coarse, fine); the fine label is the class.
            let label = rec[kind.label_bytes() - 1] as usize;
            if label >= k {
                return Err(Error::ingestion(
                    &path,
                    format!("record {r} has label {label}, expected < {k}"),
                ));
            }
            labels.push(label);
            let planes = &rec[kind.label_bytes()..];
            for p in 0..PLANE {
                pixels.push(planes[p]);
                pixels.push(planes[PLANE + p]);
                pixels.push(planes[2 * PLANE + p]);
            }
        }
    }
    let images = ImageSet::new(ImageShape::new(SIDE, SIDE, 3), pixels);
    LabeledImageDataset::new(images, labels, k)
}

//! Python bindings: datasets, label noise, augmentation, the two losses,
//! consensus selection and the full pipeline.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use noisyrefine::augment::{apply_policy, AugmentationPolicy};
use noisyrefine::config::RunConfig;
use noisyrefine::datasets::{self, BlobsConfig, FlipLedger, IdnSpec, LabeledImageDataset, Split};
use noisyrefine::image::{ImageRef, ImageShape};
use noisyrefine::linalg::Matrix;
use noisyrefine::refinery::{self, run_pipeline as run, Resume, SelectionLedger};
use noisyrefine::seed::rng_for;

create_exception!(noisyrefine_py, NoisyRefineError, PyException);

fn err(e: noisyrefine::Error) -> PyErr {
    match e.root() {
        noisyrefine::Error::Config { .. } | noisyrefine::Error::Contract(_) => PyValueError::new_err(e.to_string()),
        _ => NoisyRefineError::new_err(e.to_string()),
    }
}

fn parse_split(split: &str) -> PyResult<Split> {
    match split {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("split must be 'train' or 'test', got {other:?}"))),
    }
}

/// Images with clean, noisy and working label tracks.
#[pyclass(name = "Dataset", module = "noisyrefine_py")]
struct PyDataset {
    inner: LabeledImageDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// `(height, width, channels)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let s = self.inner.images.shape();
        (s.height, s.width, s.channels)
    }

    #[getter]
    fn sample_ids(&self) -> Vec<u64> {
        self.inner.sample_ids().to_vec()
    }

    #[getter]
    fn clean_labels(&self) -> Vec<usize> {
        self.inner.oracle().clean_labels().to_vec()
    }

    #[getter]
    fn noisy_labels(&self) -> Vec<usize> {
        self.inner.noisy_labels().to_vec()
    }

    #[getter]
    fn working_labels(&self) -> Vec<usize> {
        self.inner.working_labels().to_vec()
    }

    /// Raw HWC pixels of sample `i`.
    fn image<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyBytes>> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        Ok(PyBytes::new(py, self.inner.images.get(i).data))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(len={}, classes={}, shape={})",
            self.inner.len(),
            self.inner.num_classes(),
            self.inner.images.shape()
        )
    }
}

/// Per-sample record of which labels were corrupted.
#[pyclass(name = "FlipLedger", module = "noisyrefine_py")]
struct PyFlipLedger {
    inner: FlipLedger,
}

#[pymethods]
impl PyFlipLedger {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn flipped(&self) -> Vec<bool> {
        self.inner.flipped.clone()
    }

    #[getter]
    fn per_sample_flip_rate(&self) -> Vec<f64> {
        self.inner.per_sample_flip_rate.clone()
    }

    #[getter]
    fn realized_rate(&self) -> f64 {
        self.inner.realized_rate()
    }

    fn write_tsv(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_tsv(&path).map_err(err)
    }

    #[staticmethod]
    fn read_tsv(path: PathBuf) -> PyResult<Self> {
        FlipLedger::read_tsv(&path).map(|inner| Self { inner }).map_err(err)
    }
}

/// Synthetic patterned images; the dataset is fixed by `seed`.
#[pyfunction]
#[pyo3(signature = (split="train", train_size=3000, test_size=1000, num_classes=3, image_size=8, seed=0))]
fn generate_blobs(
    split: &str,
    train_size: usize,
    test_size: usize,
    num_classes: usize,
    image_size: usize,
    seed: u64,
) -> PyResult<PyDataset> {
    let cfg = BlobsConfig {
        train_size,
        test_size,
        num_classes,
        image_size,
        seed,
        ..BlobsConfig::default()
    };
    datasets::generate_blobs(&cfg, parse_split(split)?)
        .map(|inner| PyDataset { inner })
        .map_err(err)
}

/// Loads `cifar10-train`, `cifar100-test`, `blobs` and so on from `path`.
#[pyfunction]
fn load_dataset(path: PathBuf, variant: &str) -> PyResult<PyDataset> {
    datasets::load_dataset(&path, variant).map(|inner| PyDataset { inner }).map_err(err)
}

/// Corrupts a copy of `dataset` with instance-dependent noise.
#[pyfunction]
#[pyo3(signature = (dataset, target_rate, seed))]
fn inject_idn(dataset: &PyDataset, target_rate: f64, seed: u64) -> PyResult<(PyDataset, PyFlipLedger)> {
    let (noisy, ledger) = datasets::inject_idn(dataset.inner.clone(), &IdnSpec::new(target_rate, seed)).map_err(err)?;
    Ok((PyDataset { inner: noisy }, PyFlipLedger { inner: ledger }))
}

/// Overall and per-class flip rates plus the clean-to-noisy confusion counts.
#[pyfunction]
fn noise_statistics<'py>(py: Python<'py>, dataset: &PyDataset, ledger: &PyFlipLedger) -> PyResult<Bound<'py, PyDict>> {
    let report = datasets::noise_statistics(&dataset.inner, &ledger.inner).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("overall_rate", report.overall_rate)?;
    out.set_item("per_class_rate", report.per_class_rate)?;
    out.set_item("confusion", report.confusion)?;
    Ok(out)
}

/// One random draw of an augmentation policy on raw HWC pixels. `policy` is
/// JSON; omitted fields take the contrastive defaults.
#[pyfunction]
#[pyo3(signature = (pixels, shape, seed, policy=None))]
fn augment<'py>(
    py: Python<'py>,
    pixels: &[u8],
    shape: (usize, usize, usize),
    seed: u64,
    policy: Option<&str>,
) -> PyResult<(Bound<'py, PyBytes>, (usize, usize, usize))> {
    let shape = ImageShape::new(shape.0, shape.1, shape.2);
    if pixels.len() != shape.len() {
        return Err(PyValueError::new_err(format!("{} pixels do not fill shape {shape}", pixels.len())));
    }
    let policy: AugmentationPolicy = match policy {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("policy: {e}")))?,
        None => AugmentationPolicy::default(),
    };
    policy.validate().map_err(err)?;
    let mut rng = rng_for(seed, "python-augment");
    let out = apply_policy(ImageRef { shape, data: pixels }, &policy, &mut rng).map_err(err)?;
    let s = out.shape;
    Ok((PyBytes::new(py, &out.data), (s.height, s.width, s.channels)))
}

/// NT-Xent loss over `2N` projections where rows `i` and `i + N` are positives.
#[pyfunction]
#[pyo3(signature = (projections, temperature=0.5))]
fn nt_xent_loss(projections: Vec<Vec<f64>>, temperature: f64) -> PyResult<f64> {
    let cols = projections.first().map_or(0, Vec::len);
    if projections.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("projection rows differ in length"));
    }
    noisyrefine::pretrain::nt_xent_loss(&Matrix::from_rows(&projections), temperature).map_err(err)
}

#[pyfunction]
fn cross_entropy(logits: Vec<f64>, label: usize) -> PyResult<f64> {
    noisyrefine::trainer::cross_entropy(&logits, label).map_err(err)
}

/// Indices whose loss is below `threshold` at every stage.
#[pyfunction]
#[pyo3(signature = (stage_losses, threshold=1.0))]
fn consensus(stage_losses: Vec<Vec<f64>>, threshold: f64) -> PyResult<Vec<usize>> {
    let mut ledger = SelectionLedger::new(threshold);
    let stages: Vec<usize> = (1..=stage_losses.len()).collect();
    for (&stage, losses) in stages.iter().zip(&stage_losses) {
        refinery::record_stage(&mut ledger, 1, stage, losses, threshold).map_err(err)?;
    }
    refinery::consensus(&ledger, 1, &stages).map_err(err)
}

/// A run configuration, read from or written to TOML.
#[pyclass(name = "RunConfig", module = "noisyrefine_py")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        RunConfig::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    /// The 30%-noise toy configuration on 8×8 synthetic images.
    #[staticmethod]
    #[pyo3(signature = (seed, output_dir="toy"))]
    fn toy(seed: u64, output_dir: &str) -> Self {
        Self {
            inner: RunConfig::toy(seed, output_dir),
        }
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[setter]
    fn set_iterations(&mut self, k: usize) {
        self.inner.iterations = k;
    }

    #[getter]
    fn output_dir(&self) -> PathBuf {
        self.inner.output_dir.clone()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: PathBuf) {
        self.inner.output_dir = dir;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(seed={}, iterations={})", self.inner.seed, self.inner.iterations)
    }
}

/// Prepares the data and runs pretraining, warmup and refinement. Writes
/// checkpoints and logs when `write_outputs` is set. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (config, write_outputs=false))]
fn run_pipeline<'py>(py: Python<'py>, config: &PyRunConfig, write_outputs: bool) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config.inner.clone();
    let result = py.detach(move || -> noisyrefine::Result<_> {
        let mut data = cfg.prepare()?;
        let pc = cfg.pipeline_config(&data.train)?;
        let out = write_outputs.then_some(cfg.output_dir.as_path());
        let outcome = run(&pc, &mut data.train, &data.test, out, Resume::Fresh)?;
        Ok((outcome, data.train.working_labels().to_vec()))
    });
    let (outcome, labels) = result.map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("warmup_test_accuracy", outcome.warmup_test_accuracy)?;
    out.set_item("test_accuracy", outcome.test_accuracy)?;
    out.set_item("pretrain_losses", outcome.pretrain_losses)?;
    out.set_item("initial_labels", outcome.initial_labels)?;
    out.set_item("final_labels", labels)?;
    let consensus_sizes: Vec<usize> = outcome.state.history.iter().map(|r| r.consensus.len()).collect();
    out.set_item("consensus_sizes", consensus_sizes)?;
    let working: Vec<Option<f64>> = outcome.quality.iter().map(|q| q.working_label_accuracy).collect();
    out.set_item("working_label_accuracy", working)?;
    out.set_item("injected_total", outcome.state.injected.len())?;
    Ok(out)
}

#[pymodule]
fn noisyrefine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NoisyRefineError", m.py().get_type::<NoisyRefineError>())?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFlipLedger>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_function(wrap_pyfunction!(generate_blobs, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(inject_idn, m)?)?;
    m.add_function(wrap_pyfunction!(noise_statistics, m)?)?;
    m.add_function(wrap_pyfunction!(augment, m)?)?;
    m.add_function(wrap_pyfunction!(nt_xent_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(consensus, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}

//! Encoder, projection head and classifier head over one flat parameter
//! vector, with hand-written backward passes and a pluggable optimizer.
//!
//! Parameter layout is `[encoder | projection head | classifier head]`.
//! None of the layers is stochastic, so training and inference forwards are
//! the same function.

mod checkpoint;
pub mod layers;
mod optim;

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{cosine_lr, Optimizer, Sgd, SgdConfig};

use crate::augment::FloatImage;
use crate::error::{Error, Result};
use crate::image::{ImageRef, ImageShape};
use crate::linalg::Matrix;
use crate::seed::rng_for;
use layers::{global_avg_pool, global_avg_pool_backward, relu_backward, relu_in_place, Act, Conv, Linear};

const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub channels: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// Flatten → dense → ReLU → dense.
    Mlp { hidden: usize },
    /// 3×3 stem, residual stages, global average pool, dense to the embedding.
    ResNet { stem_channels: usize, stages: Vec<Stage> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    pub embedding_dim: usize,
    pub input: ImageShape,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub encoder: EncoderSpec,
    pub projection_hidden: usize,
    pub projection_dim: usize,
    pub num_classes: usize,
}

fn stage(channels: usize, blocks: usize, stride: usize) -> Stage {
    Stage {
        channels,
        blocks,
        stride,
    }
}

impl ModelSpec {
    /// Named presets: `tiny` (a few thousand parameters, for toy data),
    /// `small` (~300k parameters, D = 128, d = 64), `resnet18`, and `mlp`.
    pub fn preset(name: &str, input: ImageShape, num_classes: usize) -> Result<Self> {
        let (architecture, embedding_dim, projection_hidden, projection_dim) = match name {
            "tiny" => (
                Architecture::ResNet {
                    stem_channels: 8,
                    stages: vec![stage(8, 1, 1), stage(16, 1, 2)],
                },
                32,
                32,
                16,
            ),
            "small" => (
                Architecture::ResNet {
                    stem_channels: 32,
                    stages: vec![stage(32, 1, 1), stage(64, 1, 2), stage(128, 1, 2)],
                },
                128,
                128,
                64,
            ),
            "resnet18" => (
                Architecture::ResNet {
                    stem_channels: 64,
                    stages: vec![stage(64, 2, 1), stage(128, 2, 2), stage(256, 2, 2), stage(512, 2, 2)],
                },
                512,
                512,
                128,
            ),
            "mlp" => (Architecture::Mlp { hidden: 64 }, 32, 32, 16),
            other => {
                return Err(Error::config(
                    "model.preset",
                    format!("unknown preset `{other}` (tiny, small, resnet18, mlp)"),
                ))
            }
        };
        let spec = Self {
            encoder: EncoderSpec {
                architecture,
                embedding_dim,
                input,
            },
            projection_hidden,
            projection_dim,
            num_classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        if e.input.is_empty() {
            return Err(Error::config("model.input", "input shape must be non-empty"));
        }
        if e.embedding_dim == 0 || self.projection_dim == 0 || self.projection_hidden == 0 {
            return Err(Error::config("model", "layer widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least two classes"));
        }
        match &e.architecture {
            Architecture::Mlp { hidden } if *hidden == 0 => {
                return Err(Error::config("model.architecture.hidden", "must be positive"))
            }
            Architecture::ResNet { stem_channels, stages } => {
                if *stem_channels == 0 || stages.iter().any(|s| s.channels == 0 || s.stride == 0) {
                    return Err(Error::config("model.architecture", "channels and strides must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    conv2: Conv,
    shortcut: Option<Conv>,
}

#[derive(Clone, Debug)]
enum Body {
    Mlp { l1: Linear, l2: Linear },
    ResNet { stem: Conv, blocks: Vec<Block>, fc: Linear },
}

/// Parameter offsets derived from a [`ModelSpec`].
#[derive(Clone, Debug)]
struct Layout {
    body: Body,
    proj1: Linear,
    proj2: Linear,
    classifier: Linear,
    encoder: Range<usize>,
    projection: Range<usize>,
    head: Range<usize>,
}

struct Alloc(usize);

impl Alloc {
    fn conv(&mut self, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv {
        let w = self.0;
        let b = w + cout * cin * kernel * kernel;
        self.0 = b + cout;
        Conv {
            cin,
            cout,
            kernel,
            stride,
            pad: kernel / 2,
            w,
            b,
        }
    }

    fn linear(&mut self, inp: usize, out: usize) -> Linear {
        let w = self.0;
        let b = w + inp * out;
        self.0 = b + out;
        Linear { inp, out, w, b }
    }
}

impl Layout {
    fn new(spec: &ModelSpec) -> Self {
        let mut a = Alloc(0);
        let input = spec.encoder.input;
        let d = spec.encoder.embedding_dim;
        let body = match &spec.encoder.architecture {
            Architecture::Mlp { hidden } => Body::Mlp {
                l1: a.linear(input.len(), *hidden),
                l2: a.linear(*hidden, d),
            },
            Architecture::ResNet { stem_channels, stages } => {
                let stem = a.conv(input.channels, *stem_channels, 3, 1);
                let mut blocks = Vec::new();
                let mut cin = *stem_channels;
                for st in stages {
                    for b in 0..st.blocks {
                        let stride = if b == 0 { st.stride } else { 1 };
                        let conv1 = a.conv(cin, st.channels, 3, stride);
                        let conv2 = a.conv(st.channels, st.channels, 3, 1);
                        let shortcut = (stride != 1 || cin != st.channels).then(|| a.conv(cin, st.channels, 1, stride));
                        blocks.push(Block { conv1, conv2, shortcut });
                        cin = st.channels;
                    }
                }
                let fc = a.linear(cin, d);
                Body::ResNet { stem, blocks, fc }
            }
        };
        let encoder = 0..a.0;
        let proj1 = a.linear(d, spec.projection_hidden);
        let proj2 = a.linear(spec.projection_hidden, spec.projection_dim);
        let projection = encoder.end..a.0;
        let classifier = a.linear(d, spec.num_classes);
        let head = projection.end..a.0;
        Self {
            body,
            proj1,
            proj2,
            classifier,
            encoder,
            projection,
            head,
        }
    }

    fn len(&self) -> usize {
        self.head.end
    }
}

/// A batch of normalized images, interleaved per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBatch {
    pub shape: ImageShape,
    pub n: usize,
    pub data: Vec<f64>,
}

impl InputBatch {
    const MEAN: f64 = 0.5;
    const STD: f64 = 0.25;

    pub fn from_images<'a>(shape: ImageShape, images: impl IntoIterator<Item = ImageRef<'a>>) -> Result<Self> {
        let mut data = Vec::new();
        let mut n = 0;
        for img in images {
            if img.shape != shape {
                return Err(Error::Contract(format!("image shape {} != batch shape {shape}", img.shape)));
            }
            data.extend(img.data.iter().map(|&p| (p as f64 / 255.0 - Self::MEAN) / Self::STD));
            n += 1;
        }
        Ok(Self { shape, n, data })
    }

    pub fn from_float(shape: ImageShape, images: &[FloatImage]) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * shape.len());
        for img in images {
            if img.shape != shape {
                return Err(Error::Contract(format!("image shape {} != batch shape {shape}", img.shape)));
            }
            data.extend(img.data.iter().map(|&p| (p - Self::MEAN) / Self::STD));
        }
        Ok(Self {
            shape,
            n: images.len(),
            data,
        })
    }

    fn to_act(&self) -> Act {
        let ImageShape {
            height: h,
            width: w,
            channels: c,
        } = self.shape;
        let mut act = Act::zeros(c, self.n, h, w);
        for s in 0..self.n {
            let img = &self.data[s * self.shape.len()..][..self.shape.len()];
            for p in 0..h * w {
                for ch in 0..c {
                    act.data[(ch * self.n + s) * h * w + p] = img[p * c + ch];
                }
            }
        }
        act
    }
}

/// Forward activations kept for the encoder's backward pass.
pub struct EncoderTape {
    kind: TapeKind,
}

enum TapeKind {
    Mlp {
        x: Matrix,
        hidden: Matrix,
    },
    ResNet {
        input: Act,
        /// `acts[0]` is the stem output, `acts[i + 1]` the output of block `i`.
        acts: Vec<Act>,
        mids: Vec<Act>,
        pooled: Matrix,
    },
}

pub struct ProjectionTape {
    hidden: Matrix,
    projected: Matrix,
    normalized: Matrix,
    norms: Vec<f64>,
}

/// Which parameter groups a gradient touches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Touched {
    pub encoder: bool,
    pub projection: bool,
    pub classifier: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
    pub touched: Touched,
}

impl Gradients {
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelState {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<f64>,
    optimizer: Sgd,
    /// Epochs completed across all phases.
    pub epoch: usize,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
            && self.params == other.params
            && self.optimizer == other.optimizer
            && self.epoch == other.epoch
    }
}

impl ModelState {
    pub fn new(spec: ModelSpec, sgd: SgdConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        let mut params = vec![0.0; layout.len()];
        let mut rng = rng_for(seed, "model-init");
        let mut normal = |range: Range<usize>, std: f64, params: &mut Vec<f64>| {
            for p in &mut params[range] {
                *p = rng.sample::<f64, _>(StandardNormal) * std;
            }
        };
        let he_conv = |c: &Conv| (2.0 / (c.cin * c.kernel * c.kernel) as f64).sqrt();
        match &layout.body {
            Body::Mlp { l1, l2 } => {
                normal(l1.w..l1.b, (2.0 / l1.inp as f64).sqrt(), &mut params);
                normal(l2.w..l2.b, (1.0 / l2.inp as f64).sqrt(), &mut params);
            }
            Body::ResNet { stem, blocks, fc } => {
                normal(stem.w..stem.b, he_conv(stem), &mut params);
                for blk in blocks {
                    normal(blk.conv1.w..blk.conv1.b, he_conv(&blk.conv1), &mut params);
                    // Residual branches start small so the identity path dominates.
                    normal(blk.conv2.w..blk.conv2.b, 0.25 * he_conv(&blk.conv2), &mut params);
                    if let Some(sc) = &blk.shortcut {
                        normal(sc.w..sc.b, (1.0 / sc.cin as f64).sqrt(), &mut params);
                    }
                }
                normal(fc.w..fc.b, (1.0 / fc.inp as f64).sqrt(), &mut params);
            }
        }
        let (p1, p2, cls) = (layout.proj1, layout.proj2, layout.classifier);
        normal(p1.w..p1.b, (2.0 / p1.inp as f64).sqrt(), &mut params);
        normal(p2.w..p2.b, (1.0 / p2.inp as f64).sqrt(), &mut params);
        normal(cls.w..cls.b, (1.0 / cls.inp as f64).sqrt(), &mut params);
        let len = params.len();
        Ok(Self {
            spec,
            layout,
            params,
            optimizer: Sgd::new(sgd, len),
            epoch: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    pub fn reset_optimizer(&mut self) {
        self.optimizer.reset();
    }

    /// Re-draws the classifier head, leaving the encoder untouched.
    pub fn reinit_classifier(&mut self, seed: u64) {
        let cls = self.layout.classifier;
        let mut rng = rng_for(seed, "classifier-init");
        let std = (1.0 / cls.inp as f64).sqrt();
        for p in &mut self.params[cls.w..cls.b] {
            *p = rng.sample::<f64, _>(StandardNormal) * std;
        }
        self.params[cls.b..cls.b + cls.out].fill(0.0);
    }

    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<f64>, sgd: Sgd, epoch: usize) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(&spec);
        if params.len() != layout.len() || sgd.velocity.len() != layout.len() {
            return Err(Error::Version(format!(
                "checkpoint holds {} parameters, spec needs {}",
                params.len(),
                layout.len()
            )));
        }
        Ok(Self {
            spec,
            layout,
            params,
            optimizer: sgd,
            epoch,
        })
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            values: vec![0.0; self.params.len()],
            touched: Touched::default(),
        }
    }

    fn check_batch(&self, batch: &InputBatch) -> Result<()> {
        if batch.shape != self.spec.encoder.input {
            return Err(Error::Contract(format!(
                "batch images are {}, encoder expects {}",
                batch.shape, self.spec.encoder.input
            )));
        }
        if batch.data.len() != batch.n * batch.shape.len() {
            return Err(Error::Contract("batch buffer does not match its shape".into()));
        }
        Ok(())
    }

    pub fn encode_with_tape(&self, batch: &InputBatch) -> Result<(Matrix, EncoderTape)> {
        self.check_batch(batch)?;
        let p = &self.params;
        let (emb, kind) = match &self.layout.body {
            Body::Mlp { l1, l2 } => {
                let x = Matrix::from_vec(batch.n, batch.shape.len(), batch.data.clone());
                let mut hidden = l1.forward(p, &x);
                relu_in_place(&mut hidden.data);
                let emb = l2.forward(p, &hidden);
                (emb, TapeKind::Mlp { x, hidden })
            }
            Body::ResNet { stem, blocks, fc } => {
                let input = batch.to_act();
                let mut x = stem.forward(p, &input);
                relu_in_place(&mut x.data);
                let mut acts = Vec::with_capacity(blocks.len() + 1);
                let mut mids = Vec::with_capacity(blocks.len());
                for blk in blocks {
                    let mut mid = blk.conv1.forward(p, &x);
                    relu_in_place(&mut mid.data);
                    let mut out = blk.conv2.forward(p, &mid);
                    match &blk.shortcut {
                        Some(sc) => {
                            let s = sc.forward(p, &x);
                            out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
                        }
                        None => out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v),
                    }
                    relu_in_place(&mut out.data);
                    mids.push(mid);
                    acts.push(std::mem::replace(&mut x, out));
                }
                let pooled = global_avg_pool(&x);
                acts.push(x);
                let emb = fc.forward(p, &pooled);
                (
                    emb,
                    TapeKind::ResNet {
                        input,
                        acts,
                        mids,
                        pooled,
                    },
                )
            }
        };
        Ok((emb, EncoderTape { kind }))
    }

    /// Accumulates encoder gradients for `d_emb = ∂loss/∂embedding`.
    pub fn encoder_backward(&self, tape: &EncoderTape, d_emb: &Matrix, grads: &mut Gradients) {
        let p = &self.params;
        let g = &mut grads.values;
        grads.touched.encoder = true;
        match (&self.layout.body, &tape.kind) {
            (Body::Mlp { l1, l2 }, TapeKind::Mlp { x, hidden }) => {
                let mut dh = l2.backward(p, hidden, d_emb, g);
                relu_backward(&mut dh.data, &hidden.data);
                l1.backward(p, x, &dh, g);
            }
            (
                Body::ResNet { stem, blocks, fc },
                TapeKind::ResNet {
                    input,
                    acts,
                    mids,
                    pooled,
                },
            ) => {
                let d_pooled = fc.backward(p, pooled, d_emb, g);
                let last = acts.last().expect("stem activation");
                let mut dx = global_avg_pool_backward(&d_pooled, last.c, last.n, last.h, last.w);
                for (i, blk) in blocks.iter().enumerate().rev() {
                    let block_in = &acts[i];
                    relu_backward(&mut dx.data, &acts[i + 1].data);
                    let mut dmid = blk.conv2.backward(p, &mids[i], &dx, g, true).expect("input grad");
                    relu_backward(&mut dmid.data, &mids[i].data);
                    let mut din = blk.conv1.backward(p, block_in, &dmid, g, true).expect("input grad");
                    match &blk.shortcut {
                        Some(sc) => {
                            let dsc = sc.backward(p, block_in, &dx, g, true).expect("input grad");
                            din.data.iter_mut().zip(&dsc.data).for_each(|(a, b)| *a += b);
                        }
                        None => din.data.iter_mut().zip(&dx.data).for_each(|(a, b)| *a += b),
                    }
                    dx = din;
                }
                relu_backward(&mut dx.data, &acts[0].data);
                stem.backward(p, input, &dx, g, false);
            }
            _ => unreachable!("tape produced by a different architecture"),
        }
    }

    pub fn project_with_tape(&self, emb: &Matrix) -> Result<(Matrix, ProjectionTape)> {
        if emb.cols != self.spec.encoder.embedding_dim {
            return Err(Error::Contract(format!(
                "embeddings have width {}, expected {}",
                emb.cols, self.spec.encoder.embedding_dim
            )));
        }
        let p = &self.params;
        let mut hidden = self.layout.proj1.forward(p, emb);
        relu_in_place(&mut hidden.data);
        let projected = self.layout.proj2.forward(p, &hidden);
        let mut normalized = projected.clone();
        let mut norms = Vec::with_capacity(projected.rows);
        for r in 0..normalized.rows {
            let row = normalized.row_mut(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(NORM_EPS);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        let z = normalized.clone();
        Ok((
            z,
            ProjectionTape {
                hidden,
                projected,
                normalized,
                norms,
            },
        ))
    }

    /// Returns `∂loss/∂embedding` given `dz = ∂loss/∂(normalized projection)`.
    pub fn projection_backward(&self, emb: &Matrix, tape: &ProjectionTape, dz: &Matrix, grads: &mut Gradients) -> Matrix {
        grads.touched.projection = true;
        let mut du = Matrix::zeros(dz.rows, dz.cols);
        for r in 0..dz.rows {
            let z = tape.normalized.row(r);
            let g = dz.row(r);
            let norm = tape.norms[r];
            let out = du.row_mut(r);
            if norm > NORM_EPS {
                let dot: f64 = z.iter().zip(g).map(|(a, b)| a * b).sum();
                for j in 0..g.len() {
                    out[j] = (g[j] - z[j] * dot) / norm;
                }
            } else {
                for j in 0..g.len() {
                    out[j] = g[j] / NORM_EPS;
                }
            }
        }
        debug_assert_eq!(tape.projected.rows, du.rows);
        let p = &self.params;
        let mut dh = self.layout.proj2.backward(p, &tape.hidden, &du, &mut grads.values);
        relu_backward(&mut dh.data, &tape.hidden.data);
        self.layout.proj1.backward(p, emb, &dh, &mut grads.values)
    }

    pub fn classify(&self, emb: &Matrix) -> Result<Matrix> {
        if emb.cols != self.spec.encoder.embedding_dim {
            return Err(Error::Contract(format!(
                "embeddings have width {}, expected {}",
                emb.cols, self.spec.encoder.embedding_dim
            )));
        }
        Ok(self.layout.classifier.forward(&self.params, emb))
    }

    pub fn classifier_backward(&self, emb: &Matrix, d_logits: &Matrix, grads: &mut Gradients) -> Matrix {
        grads.touched.classifier = true;
        self.layout.classifier.backward(&self.params, emb, d_logits, &mut grads.values)
    }

    pub fn forward_embed(&self, batch: &InputBatch) -> Result<Matrix> {
        self.encode_with_tape(batch).map(|(e, _)| e)
    }

    /// L2-normalized projections of `embeddings`.
    pub fn forward_project(&self, embeddings: &Matrix) -> Result<Matrix> {
        self.project_with_tape(embeddings).map(|(z, _)| z)
    }

    pub fn forward_logits(&self, batch: &InputBatch) -> Result<Matrix> {
        let emb = self.forward_embed(batch)?;
        self.classify(&emb)
    }

    /// Applies one optimizer step to every touched parameter group.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.values.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "gradient has {} entries, model has {} parameters",
                grads.values.len(),
                self.params.len()
            )));
        }
        if let Some(i) = grads.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                phase: "update".into(),
                epoch: self.epoch,
                batch: 0,
                what: format!("gradient entry {i} is {}", grads.values[i]),
            });
        }
        let groups = [
            (grads.touched.encoder, self.layout.encoder.clone()),
            (grads.touched.projection, self.layout.projection.clone()),
            (grads.touched.classifier, self.layout.head.clone()),
        ];
        let backup = (self.params.clone(), self.optimizer.velocity.clone());
        for (on, range) in groups {
            if on {
                self.optimizer.step(&mut self.params, &grads.values, range, lr);
            }
        }
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            (self.params, self.optimizer.velocity) = backup;
            return Err(Error::NonFinite {
                phase: "update".into(),
                epoch: self.epoch,
                batch: 0,
                what: format!("parameter {i} would become non-finite"),
            });
        }
        Ok(())
    }

    /// Encoder, projection-head and classifier-head parameter ranges.
    pub fn parameter_groups(&self) -> [Range<usize>; 3] {
        [
            self.layout.encoder.clone(),
            self.layout.projection.clone(),
            self.layout.head.clone(),
        ]
    }

    #[cfg(test)]
    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Inference over many images in fixed-size chunks.
pub fn logits_for(state: &ModelState, images: &crate::image::ImageSet, chunk: usize) -> Result<Matrix> {
    let k = state.spec().num_classes;
    let mut out = Matrix::zeros(images.len(), k);
    let chunk = chunk.max(1);
    for start in (0..images.len()).step_by(chunk) {
        let end = (start + chunk).min(images.len());
        let batch = InputBatch::from_images(images.shape(), (start..end).map(|i| images.get(i)))?;
        let logits = state.forward_logits(&batch)?;
        out.data[start * k..end * k].copy_from_slice(&logits.data);
    }
    Ok(out)
}

//! A one-hidden-layer extractor `f(x; theta)` and a linear head `g(z; phi)`
//! with hand-written backward passes.
//!
//! The extractor comes in three shapes:
//!
//! * `Mlp`: `f(x) = W2 relu(W1 x + b1) + b2`
//! * `ResidualAdapter`: `f(z) = z + W2 relu(W1 z + b1) + b2`, with `W2`
//!   zero-initialized so the map starts as the identity
//! * `Identity`: `f(z) = z`, no parameters

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::optim::{train_epoch, Objective, Optimizer, OptimizerConfig, TrainSet};
use crate::rng::{self, tags};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TURNMD01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExtractorMode {
    Mlp,
    ResidualAdapter,
    Identity,
}

impl ExtractorMode {
    fn tag(self) -> u8 {
        match self {
            ExtractorMode::Mlp => 0,
            ExtractorMode::ResidualAdapter => 1,
            ExtractorMode::Identity => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ExtractorMode::Mlp),
            1 => Some(ExtractorMode::ResidualAdapter),
            2 => Some(ExtractorMode::Identity),
            _ => None,
        }
    }
}

/// Which parameters a training step may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TuningMode {
    /// Linear probing: the extractor is frozen.
    Lp,
    /// Full fine-tuning: extractor and head both train.
    Fft,
}

impl TuningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Lp => "lp",
            TuningMode::Fft => "fft",
        }
    }
}

impl std::str::FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lp" => Ok(TuningMode::Lp),
            "fft" => Ok(TuningMode::Fft),
            other => Err(Error::config(format!("unknown tuning mode `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extractor {
    pub mode: ExtractorMode,
    /// `H x L`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `F x H`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Extractor {
    pub fn identity(width: usize) -> Self {
        Self {
            mode: ExtractorMode::Identity,
            w1: Array2::zeros((0, width)),
            b1: Array1::zeros(0),
            w2: Array2::zeros((width, 0)),
            b2: Array1::zeros(0),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        match self.mode {
            ExtractorMode::Mlp => self.w2.nrows(),
            _ => self.w1.ncols(),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    /// Applies the extractor to a batch of rows.
    pub fn extract(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "input width {} but extractor expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(self.run(inputs).2)
    }

    /// Returns (pre-activation, hidden, features).
    fn run(&self, x: ArrayView2<'_, f64>) -> (Option<Array2<f64>>, Option<Array2<f64>>, Array2<f64>) {
        if self.mode == ExtractorMode::Identity {
            return (None, None, x.to_owned());
        }
        let pre = x.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let mut out = hidden.dot(&self.w2.t()) + &self.b2;
        if self.mode == ExtractorMode::ResidualAdapter {
            out += &x;
        }
        (Some(pre), Some(hidden), out)
    }

    fn is_finite(&self) -> bool {
        [&self.w1, &self.w2].iter().all(|m| m.iter().all(|v| v.is_finite()))
            && [&self.b1, &self.b2].iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `C x F`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearHead {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            w: Array2::zeros((classes, features)),
            b: Array1::zeros(classes),
        }
    }

    pub fn logits(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        features.dot(&self.w.t()) + &self.b
    }

    pub fn reset(&mut self) {
        self.w.fill(0.0);
        self.b.fill(0.0);
    }
}

/// Extractor plus head. `version` is bumped on every parameter update so a
/// forward cache can be checked against the parameters it was built from.
#[derive(Clone, Debug)]
pub struct Model {
    pub extractor: Extractor,
    pub head: LinearHead,
    version: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.extractor == other.extractor && self.head == other.head
    }
}

impl Model {
    pub fn new(extractor: Extractor, head: LinearHead) -> Result<Self> {
        if head.w.ncols() != extractor.feature_dim() || head.b.len() != head.w.nrows() {
            return Err(Error::contract("head shape does not match extractor features"));
        }
        if extractor.mode != ExtractorMode::Mlp && extractor.feature_dim() != extractor.input_dim() {
            return Err(Error::contract("identity and adapter extractors need F = L"));
        }
        Ok(Self {
            extractor,
            head,
            version: 0,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.extractor.input_dim(),
            hidden: self.extractor.hidden_dim(),
            feature: self.extractor.feature_dim(),
            classes: self.head.w.nrows(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.w.nrows()
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    /// Logits for raw inputs, without keeping a cache.
    pub fn logits(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z = self.extractor.extract(inputs)?;
        Ok(self.head.logits(z.view()))
    }

    /// Parameter tensors in optimizer slot order: head `W`, head `b`, then
    /// `W1`, `b1`, `W2`, `b2`.
    pub(crate) fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        let e = &mut self.extractor;
        [
            self.head.w.as_slice_mut().unwrap(),
            self.head.b.as_slice_mut().unwrap(),
            e.w1.as_slice_mut().unwrap(),
            e.b1.as_slice_mut().unwrap(),
            e.w2.as_slice_mut().unwrap(),
            e.b2.as_slice_mut().unwrap(),
        ]
    }
}

/// Draws `U(-a, a)` with `a = sqrt(3 / fan_in)`, i.e. variance `1 / fan_in`.
fn fan_in_uniform(rows: usize, cols: usize, r: &mut rng::Rng) -> Array2<f64> {
    let a = (3.0 / cols.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| r.random_range(-a..a))
}

/// Builds a model with fan-in uniform weights and zero biases. The adapter's
/// output layer and, when `zero_head` is set, the head start at zero.
pub fn init_model(dims: ModelDims, mode: ExtractorMode, zero_head: bool, seed: u64) -> Result<Model> {
    let ModelDims { input, hidden, feature, classes } = dims;
    if input == 0 || feature == 0 || classes == 0 || (hidden == 0 && mode != ExtractorMode::Identity) {
        return Err(Error::config("model dimensions must be positive"));
    }
    let mut r = rng::stream(seed, tags::INIT);
    let extractor = match mode {
        ExtractorMode::Identity => Extractor::identity(input),
        ExtractorMode::Mlp | ExtractorMode::ResidualAdapter => {
            let w1 = fan_in_uniform(hidden, input, &mut r);
            let w2 = if mode == ExtractorMode::Mlp {
                fan_in_uniform(feature, hidden, &mut r)
            } else {
                Array2::zeros((feature, hidden))
            };
            Extractor {
                mode,
                w1,
                b1: Array1::zeros(hidden),
                w2,
                b2: Array1::zeros(feature),
            }
        }
    };
    let head = if zero_head {
        LinearHead::zeros(feature, classes)
    } else {
        LinearHead {
            w: fan_in_uniform(classes, feature, &mut r),
            b: Array1::zeros(classes),
        }
    };
    Model::new(extractor, head)
}

/// Activations kept by [`forward`] for the matching [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    mode: TuningMode,
    version: u64,
    inputs: Option<Array2<f64>>,
    pre_hidden: Option<Array2<f64>>,
    hidden: Option<Array2<f64>>,
    features: Array2<f64>,
}

impl ForwardCache {
    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }
}

/// Runs extractor and head on raw inputs.
pub fn forward(model: &Model, inputs: ArrayView2<'_, f64>, mode: TuningMode) -> Result<(Array2<f64>, ForwardCache)> {
    if inputs.ncols() != model.extractor.input_dim() {
        return Err(Error::contract(format!(
            "input width {} but model expects {}",
            inputs.ncols(),
            model.extractor.input_dim()
        )));
    }
    let (pre, hidden, features) = model.extractor.run(inputs);
    let logits = model.head.logits(features.view());
    let keep_inner = mode == TuningMode::Fft;
    let cache = ForwardCache {
        mode,
        version: model.version,
        inputs: keep_inner.then(|| inputs.to_owned()),
        pre_hidden: if keep_inner { pre } else { None },
        hidden: if keep_inner { hidden } else { None },
        features,
    };
    Ok((logits, cache))
}

/// Runs only the head on features that were extracted beforehand.
pub fn forward_features(model: &Model, features: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
    if features.ncols() != model.extractor.feature_dim() {
        return Err(Error::contract(format!(
            "feature width {} but head expects {}",
            features.ncols(),
            model.extractor.feature_dim()
        )));
    }
    let logits = model.head.logits(features);
    let cache = ForwardCache {
        mode: TuningMode::Lp,
        version: model.version,
        inputs: None,
        pre_hidden: None,
        hidden: None,
        features: features.to_owned(),
    };
    Ok((logits, cache))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub head: HeadGrads,
    /// Present only for full fine-tuning.
    pub extractor: Option<ExtractorGrads>,
}

impl Gradients {
    pub(crate) fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.head.w.as_slice().unwrap(), self.head.b.as_slice().unwrap()];
        if let Some(e) = &self.extractor {
            out.extend([
                e.w1.as_slice().unwrap(),
                e.b1.as_slice().unwrap(),
                e.w2.as_slice().unwrap(),
                e.b2.as_slice().unwrap(),
            ]);
        }
        out
    }
}

/// Gradients of the batch-mean loss. `dlogits` holds, per row, the gradient
/// of that sample's loss with respect to its logits.
pub fn backward(model: &Model, cache: &ForwardCache, dlogits: ArrayView2<'_, f64>) -> Result<Gradients> {
    if cache.version != model.version {
        return Err(Error::contract("forward cache is stale: parameters changed since forward"));
    }
    if dlogits.dim() != (cache.features.nrows(), model.num_classes()) {
        return Err(Error::contract("dlogits shape does not match the cached batch"));
    }
    let batch = dlogits.nrows().max(1) as f64;
    let dl = dlogits.mapv(|v| v / batch);
    let head = HeadGrads {
        w: dl.t().dot(&cache.features),
        b: dl.sum_axis(Axis(0)),
    };
    if cache.mode == TuningMode::Lp {
        return Ok(Gradients { head, extractor: None });
    }

    let e = &model.extractor;
    let extractor = match e.mode {
        ExtractorMode::Identity => ExtractorGrads {
            w1: Array2::zeros(e.w1.dim()),
            b1: Array1::zeros(e.b1.len()),
            w2: Array2::zeros(e.w2.dim()),
            b2: Array1::zeros(e.b2.len()),
        },
        ExtractorMode::Mlp | ExtractorMode::ResidualAdapter => {
            let (inputs, pre, hidden) = match (&cache.inputs, &cache.pre_hidden, &cache.hidden) {
                (Some(x), Some(p), Some(h)) => (x, p, h),
                _ => return Err(Error::contract("cache lacks extractor activations")),
            };
            // The residual skip adds nothing to parameter gradients.
            let dz = dl.dot(&model.head.w);
            let w2 = dz.t().dot(hidden);
            let b2 = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&e.w2);
            da.zip_mut_with(pre, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0
                }
            });
            ExtractorGrads {
                w1: da.t().dot(inputs),
                b1: da.sum_axis(Axis(0)),
                w2,
                b2,
            }
        }
    };
    Ok(Gradients {
        head,
        extractor: Some(extractor),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains the extractor together with a throwaway head under cross entropy
/// on a clean split and returns the trained extractor.
pub fn pretrain_extractor(extractor: &Extractor, split: &Dataset, classes: usize, config: &PretrainConfig) -> Result<Extractor> {
    if split.is_empty() {
        return Err(Error::config("pretraining split is empty"));
    }
    if config.epochs == 0 {
        return Ok(extractor.clone());
    }
    let mut r = rng::stream(config.seed, tags::PRETRAIN);
    let head = LinearHead {
        w: fan_in_uniform(classes, extractor.feature_dim(), &mut r),
        b: Array1::zeros(classes),
    };
    let mut model = Model::new(extractor.clone(), head)?;
    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let data = TrainSet::raw(split.inputs().view(), split.given_labels());
    let mut objective = Objective::new(LossKind::Ce, split.len(), classes)?;
    for epoch in 0..config.epochs {
        let seed = rng::derive_seed(config.seed, epoch as u64);
        let stats = train_epoch(&mut model, &data, &mut objective, &mut opt, config.batch_size, seed, TuningMode::Fft)?;
        log::debug!("pretrain epoch {epoch}: loss {:.4} acc {:.4}", stats.mean_loss, stats.accuracy);
    }
    Ok(model.extractor)
}

/// Writes a checkpoint: magic, `L, H, F, C` as `u64`, one mode byte, then
/// `W1, b1, W2, b2, W, b` as little-endian `f64`.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let d = model.dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for v in [d.input, d.hidden, d.feature, d.classes] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.push(model.extractor.mode.tag());
    let e = &model.extractor;
    for t in [
        e.w1.as_slice().unwrap(),
        e.b1.as_slice().unwrap(),
        e.w2.as_slice().unwrap(),
        e.b2.as_slice().unwrap(),
        model.head.w.as_slice().unwrap(),
        model.head.b.as_slice().unwrap(),
    ] {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::data_at(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::data_at(path, e))?;
    if bytes.len() < 41 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::data_at(path, "unrecognized format"));
    }
    let dim = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().unwrap()) as usize;
    let (l, h, f, c) = (dim(0), dim(1), dim(2), dim(3));
    let mode = ExtractorMode::from_tag(bytes[40]).ok_or_else(|| Error::data_at(path, "unknown extractor mode"))?;
    let (h, f) = if mode == ExtractorMode::Identity { (0, l) } else { (h, f) };
    let sizes = [h * l, h, f * h, if mode == ExtractorMode::Identity { 0 } else { f }, c * f, c];
    let total: usize = sizes.iter().sum();
    if bytes.len() != 41 + total * 8 {
        return Err(Error::data_at(path, "checkpoint length does not match its dimensions"));
    }
    let mut values = bytes[41..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
    let shape_err = |e: ndarray::ShapeError| Error::data_at(path, e);
    let extractor = Extractor {
        mode,
        w1: Array2::from_shape_vec((h, l), take(sizes[0])).map_err(shape_err)?,
        b1: Array1::from(take(sizes[1])),
        w2: Array2::from_shape_vec((if mode == ExtractorMode::Identity { l } else { f }, h), take(sizes[2])).map_err(shape_err)?,
        b2: Array1::from(take(sizes[3])),
    };
    let head = LinearHead {
        w: Array2::from_shape_vec((c, f), take(sizes[4])).map_err(shape_err)?,
        b: Array1::from(take(sizes[5])),
    };
    if !extractor.is_finite() || head.w.iter().chain(head.b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite parameter in {}", path.display())));
    }
    Model::new(extractor, head)
}

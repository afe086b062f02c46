//! Labelled datasets, the synthetic cluster benchmark, stratified splits and
//! the on-disk bundle format.

mod bundle;

pub use bundle::{read_dataset, write_dataset, FEATURES_MAGIC, LABELS_MAGIC};

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{self, tags};

/// Sentinel for a true label that is not known.
pub const UNKNOWN_LABEL: u32 = u32::MAX;

/// Whether rows are raw inputs or features already produced by an extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DataKind {
    Raw,
    Feature,
}

impl DataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DataKind::Raw => "raw",
            DataKind::Feature => "feature",
        }
    }
}

impl std::str::FromStr for DataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(DataKind::Raw),
            "feature" => Ok(DataKind::Feature),
            other => Err(Error::config(format!("unknown data kind `{other}`"))),
        }
    }
}

/// An `N x L` input matrix with given (possibly noisy) labels and, when known,
/// the true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Array2<f64>,
    given_labels: Vec<u32>,
    true_labels: Option<Vec<u32>>,
    num_classes: usize,
    kind: DataKind,
}

impl Dataset {
    pub fn new(
        inputs: Array2<f64>,
        given_labels: Vec<u32>,
        true_labels: Option<Vec<u32>>,
        num_classes: usize,
        kind: DataKind,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("dataset must have at least one class"));
        }
        let n = inputs.nrows();
        if given_labels.len() != n {
            return Err(Error::Data(format!(
                "{} given labels for {} rows",
                given_labels.len(),
                n
            )));
        }
        if let Some(bad) = given_labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::Data(format!(
                "given label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(truth) = &true_labels {
            if truth.len() != n {
                return Err(Error::Data(format!(
                    "{} true labels for {} rows",
                    truth.len(),
                    n
                )));
            }
            if let Some(bad) = truth
                .iter()
                .find(|&&y| y != UNKNOWN_LABEL && y as usize >= num_classes)
            {
                return Err(Error::Data(format!(
                    "true label {bad} out of range for {num_classes} classes"
                )));
            }
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite input value"));
        }
        Ok(Self {
            inputs,
            given_labels,
            true_labels,
            num_classes,
            kind,
        })
    }

    /// A dataset whose given labels are also its true labels.
    pub fn clean(inputs: Array2<f64>, labels: Vec<u32>, num_classes: usize, kind: DataKind) -> Result<Self> {
        let truth = labels.clone();
        Self::new(inputs, labels, Some(truth), num_classes, kind)
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn given_labels(&self) -> &[u32] {
        &self.given_labels
    }

    pub fn true_labels(&self) -> Option<&[u32]> {
        self.true_labels.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Replaces the given labels, keeping inputs and true labels.
    pub fn with_given_labels(&self, labels: Vec<u32>) -> Result<Self> {
        Self::new(
            self.inputs.clone(),
            labels,
            self.true_labels.clone(),
            self.num_classes,
            self.kind,
        )
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select(Axis(0), indices),
            given_labels: indices.iter().map(|&i| self.given_labels[i]).collect(),
            true_labels: self
                .true_labels
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            num_classes: self.num_classes,
            kind: self.kind,
        }
    }

    /// Row indices grouped by given label.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut buckets = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.given_labels.iter().enumerate() {
            buckets[y as usize].push(i);
        }
        buckets
    }
}

/// Parameters of the Gaussian-cluster benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub per_class_pretrain: usize,
    /// Multiplier on the standard-normal class-mean draw.
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.input_dim == 0 {
            return Err(Error::config("classes and dim must be positive"));
        }
        if self.per_class_train == 0 || self.per_class_test == 0 || self.per_class_pretrain == 0 {
            return Err(Error::config("per-class counts must be at least 1"));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::config("separation must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Train, test and pretraining splits drawn around shared class means.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplits {
    pub train: Dataset,
    pub test: Dataset,
    pub pretrain: Dataset,
}

/// Draws class means `separation * N(0, I)` once, then every sample as its
/// class mean plus unit-variance isotropic noise. Values are rounded to `f32`
/// so a dataset equals its persisted bundle.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticSplits> {
    spec.validate()?;
    let mut mean_rng = rng::stream(spec.seed, tags::CLASS_MEANS);
    let means: Vec<Array1<f64>> = (0..spec.num_classes)
        .map(|_| {
            Array1::from_shape_fn(spec.input_dim, |_| {
                let g: f64 = StandardNormal.sample(&mut mean_rng);
                spec.separation * g
            })
        })
        .collect();

    let draw = |per_class: usize, tag: u64| -> Result<Dataset> {
        let mut r = rng::stream(spec.seed, tag);
        let n = per_class * spec.num_classes;
        let mut inputs = Array2::zeros((n, spec.input_dim));
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in means.iter().enumerate() {
            for k in 0..per_class {
                let mut row = inputs.row_mut(c * per_class + k);
                for (x, &m) in row.iter_mut().zip(mean.iter()) {
                    let e: f64 = StandardNormal.sample(&mut r);
                    *x = (m + e) as f32 as f64;
                }
                labels.push(c as u32);
            }
        }
        Dataset::clean(inputs, labels, spec.num_classes, DataKind::Raw)
    };

    Ok(SyntheticSplits {
        train: draw(spec.per_class_train, tags::TRAIN_SAMPLES)?,
        test: draw(spec.per_class_test, tags::TEST_SAMPLES)?,
        pretrain: draw(spec.per_class_pretrain, tags::PRETRAIN_SAMPLES)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub valid_fraction: f64,
    pub seed: u64,
}

/// Stratified split. Each class gives `floor(fraction * count)` of its rows,
/// chosen by a seeded shuffle, to the validation side. Both outputs keep the
/// original row order.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&spec.valid_fraction) {
        return Err(Error::config(format!(
            "valid_fraction must lie in [0, 1), got {}",
            spec.valid_fraction
        )));
    }
    let mut r = rng::stream(spec.seed, tags::SPLIT);
    let mut is_valid = vec![false; dataset.len()];
    for (class, mut rows) in dataset.indices_by_class().into_iter().enumerate() {
        let take = (spec.valid_fraction * rows.len() as f64).floor() as usize;
        if take == 0 && spec.valid_fraction > 0.0 && !rows.is_empty() {
            log::warn!("class {class} has too few rows to contribute validation samples");
        }
        rows.shuffle(&mut r);
        for &i in &rows[..take] {
            is_valid[i] = true;
        }
    }
    let (valid, train): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| is_valid[i]);
    Ok((dataset.subset(&train), dataset.subset(&valid)))
}

//! Label-noise injectors: symmetric, asymmetric (successor within a class
//! group) and instance-dependent.
//!
//! Every injector keeps the true labels untouched and returns a flip mask with
//! `flip_mask[i] == (given[i] != true[i])`.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dataset::{DataKind, Dataset, UNKNOWN_LABEL};
use crate::error::{Error, Result};
use crate::losses::softmax_in_place;
use crate::rng::{self, tags};

/// Lower bound applied to the instance-noise standard deviation.
pub const MIN_INSTANCE_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    None,
    Symmetric,
    Asymmetric,
    Instance,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::Asymmetric => "asymmetric",
            NoiseKind::Instance => "instance",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => NoiseKind::None,
            "symmetric" | "sym" => NoiseKind::Symmetric,
            "asymmetric" | "asym" => NoiseKind::Asymmetric,
            "instance" => NoiseKind::Instance,
            other => return Err(Error::config(format!("unknown noise kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub ratio: f64,
    /// Ordered class groups for asymmetric noise.
    pub groups: Option<Vec<Vec<u32>>>,
    pub std: f64,
    /// Symmetric only: draw the replacement over all classes, so some chosen
    /// rows keep their label.
    pub allow_identity_flip: bool,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            ratio: 0.0,
            groups: None,
            std: 0.1,
            allow_identity_flip: false,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        check_ratio(self.ratio)?;
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::config(format!("std must be positive, got {}", self.std)));
        }
        Ok(())
    }

    pub fn apply(&self, dataset: &Dataset) -> Result<(NoisyDataset, Option<InstanceNoiseDraw>)> {
        self.validate()?;
        match self.kind {
            NoiseKind::None => {
                let truth = require_truth(dataset)?.to_vec();
                Ok((NoisyDataset::from_labels(dataset, truth)?, None))
            }
            NoiseKind::Symmetric => Ok((
                inject_symmetric_with(dataset, self.ratio, self.allow_identity_flip, self.seed)?,
                None,
            )),
            NoiseKind::Asymmetric => {
                let groups = self.groups.as_ref().ok_or_else(|| {
                    Error::config("asymmetric noise requires `groups`")
                })?;
                Ok((inject_asymmetric(dataset, groups, self.ratio, self.seed)?, None))
            }
            NoiseKind::Instance => {
                let (noisy, draw) = inject_instance(dataset, self.ratio, self.std, self.seed)?;
                Ok((noisy, Some(draw)))
            }
        }
    }
}

/// A dataset after noise injection plus the per-row flip indicator.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub dataset: Dataset,
    pub flip_mask: Vec<bool>,
}

impl NoisyDataset {
    fn from_labels(source: &Dataset, labels: Vec<u32>) -> Result<Self> {
        let truth = require_truth(source)?;
        let flip_mask = labels.iter().zip(truth).map(|(a, b)| a != b).collect();
        Ok(Self {
            dataset: source.with_given_labels(labels)?,
            flip_mask,
        })
    }

    pub fn flip_count(&self) -> usize {
        self.flip_mask.iter().filter(|&&f| f).count()
    }

    pub fn flip_fraction(&self) -> f64 {
        if self.flip_mask.is_empty() {
            0.0
        } else {
            self.flip_count() as f64 / self.flip_mask.len() as f64
        }
    }
}

/// The random draws behind instance-dependent noise.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNoiseDraw {
    /// `L x C` projection from inputs to flip-target scores.
    pub projection: Array2<f64>,
    pub flip_rates: Vec<f64>,
}

fn check_ratio(ratio: f64) -> Result<()> {
    if (0.0..=1.0).contains(&ratio) {
        Ok(())
    } else {
        Err(Error::config(format!("noise ratio must lie in [0, 1], got {ratio}")))
    }
}

fn require_truth(dataset: &Dataset) -> Result<&[u32]> {
    let truth = dataset
        .true_labels()
        .ok_or_else(|| Error::config("noise injection needs true labels"))?;
    if truth.contains(&UNKNOWN_LABEL) {
        return Err(Error::config("noise injection needs every true label to be known"));
    }
    Ok(truth)
}

/// Flips exactly `floor(ratio * N)` rows to a different class chosen uniformly.
pub fn inject_symmetric(dataset: &Dataset, ratio: f64, seed: u64) -> Result<NoisyDataset> {
    inject_symmetric_with(dataset, ratio, false, seed)
}

pub fn inject_symmetric_with(
    dataset: &Dataset,
    ratio: f64,
    allow_identity_flip: bool,
    seed: u64,
) -> Result<NoisyDataset> {
    check_ratio(ratio)?;
    let truth = require_truth(dataset)?;
    let c = dataset.num_classes() as u32;
    let n = dataset.len();
    let flips = (ratio * n as f64).floor() as usize;
    if flips > 0 && c < 2 {
        return Err(Error::config("symmetric noise needs at least two classes"));
    }
    let mut r = rng::stream(seed, tags::NOISE);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut labels = dataset.given_labels().to_vec();
    for &i in &order[..flips] {
        let y = truth[i];
        labels[i] = if allow_identity_flip {
            r.random_range(0..c)
        } else {
            // Uniform over the C - 1 classes other than y.
            let k = r.random_range(0..c - 1);
            if k >= y {
                k + 1
            } else {
                k
            }
        };
    }
    NoisyDataset::from_labels(dataset, labels)
}

/// Checks that `groups` partitions `0..num_classes` and returns each class's
/// successor within its group.
pub fn successor_table(groups: &[Vec<u32>], num_classes: usize) -> Result<Vec<u32>> {
    let mut next = vec![None; num_classes];
    for group in groups {
        for (k, &class) in group.iter().enumerate() {
            let slot = next.get_mut(class as usize).ok_or_else(|| {
                Error::config(format!("group member {class} out of range for {num_classes} classes"))
            })?;
            if slot.is_some() {
                return Err(Error::config(format!("class {class} appears in more than one group")));
            }
            *slot = Some(group[(k + 1) % group.len()]);
        }
    }
    next.into_iter()
        .enumerate()
        .map(|(c, s)| s.ok_or_else(|| Error::config(format!("class {c} missing from groups"))))
        .collect()
}

/// For each class, flips exactly `floor(ratio * count)` of its rows to the
/// next class (cyclically) within its group.
pub fn inject_asymmetric(
    dataset: &Dataset,
    groups: &[Vec<u32>],
    ratio: f64,
    seed: u64,
) -> Result<NoisyDataset> {
    check_ratio(ratio)?;
    let truth = require_truth(dataset)?;
    let next = successor_table(groups, dataset.num_classes())?;
    let mut by_class = vec![Vec::new(); dataset.num_classes()];
    for (i, &y) in truth.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut r = rng::stream(seed, tags::NOISE);
    let mut labels = dataset.given_labels().to_vec();
    for (class, mut rows) in by_class.into_iter().enumerate() {
        let flips = (ratio * rows.len() as f64).floor() as usize;
        rows.shuffle(&mut r);
        for &i in &rows[..flips] {
            labels[i] = next[class];
        }
    }
    NoisyDataset::from_labels(dataset, labels)
}

/// Instance-dependent noise: per-row flip rate from a `[0, 1]`-truncated
/// normal, flip target drawn from a softmax over a random projection of the
/// input with the true class masked out.
pub fn inject_instance(
    dataset: &Dataset,
    ratio: f64,
    std: f64,
    seed: u64,
) -> Result<(NoisyDataset, InstanceNoiseDraw)> {
    check_ratio(ratio)?;
    if dataset.kind() != DataKind::Raw {
        return Err(Error::config("instance-dependent noise needs raw inputs"));
    }
    let truth = require_truth(dataset)?;
    let c = dataset.num_classes();
    if c < 2 {
        return Err(Error::config("instance-dependent noise needs at least two classes"));
    }
    let std = std.max(MIN_INSTANCE_STD);
    if !std.is_finite() {
        return Err(Error::config("std must be finite"));
    }
    let mut r = rng::stream(seed, tags::NOISE);
    let rate_dist = Normal::new(ratio, std).map_err(|e| Error::config(e.to_string()))?;
    let flip_rates: Vec<f64> = (0..dataset.len())
        .map(|_| loop {
            let q = rate_dist.sample(&mut r);
            if (0.0..=1.0).contains(&q) {
                break q;
            }
        })
        .collect();
    let projection = Array2::from_shape_fn((dataset.dim(), c), |_| StandardNormal.sample(&mut r));
    let scores = dataset.inputs().dot(&projection);

    let mut labels = Vec::with_capacity(dataset.len());
    let mut probs = vec![0.0; c];
    for (i, row) in scores.rows().into_iter().enumerate() {
        let y = truth[i] as usize;
        probs.iter_mut().zip(row.iter()).for_each(|(p, &s)| *p = s);
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite noise score at row {i}")));
        }
        probs[y] = f64::NEG_INFINITY;
        softmax_in_place(&mut probs);
        let q = flip_rates[i];
        probs.iter_mut().for_each(|p| *p *= q);
        probs[y] = 1.0 - q;
        labels.push(sample_categorical(&probs, r.random::<f64>()) as u32);
    }
    let noisy = NoisyDataset::from_labels(dataset, labels)?;
    Ok((noisy, InstanceNoiseDraw { projection, flip_rates }))
}

fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let mut acc = 0.0;
    let target = u * total;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if target < acc {
            return k;
        }
    }
    // Rounding left `target` past the last boundary: take the last class
    // with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Fine-label index to superclass index for CIFAR-100.
const CIFAR100_COARSE: [u32; 100] = [
    4, 1, 14, 8, 0, 6, 7, 7, 18, 3, 3, 14, 9, 18, 7, 11, 3, 9, 7, 11, 6, 11, 5, 10, 7, 6, 13, 15, 3,
    15, 0, 11, 1, 10, 12, 14, 16, 9, 11, 5, 5, 19, 8, 8, 15, 13, 14, 17, 18, 10, 16, 4, 17, 4, 2,
    0, 17, 4, 18, 17, 10, 3, 2, 12, 12, 16, 12, 1, 9, 19, 2, 10, 0, 1, 16, 12, 9, 13, 15, 13, 16,
    19, 2, 4, 6, 19, 5, 5, 8, 19, 18, 1, 2, 15, 6, 0, 17, 8, 14, 13,
];

/// The 20 CIFAR-100 superclasses, each listing its five fine classes in
/// ascending order.
pub fn cifar100_superclass_groups() -> Vec<Vec<u32>> {
    let mut groups = vec![Vec::new(); 20];
    for (fine, &coarse) in CIFAR100_COARSE.iter().enumerate() {
        groups[coarse as usize].push(fine as u32);
    }
    groups
}

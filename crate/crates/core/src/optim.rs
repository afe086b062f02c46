//! SGD with momentum, AdamW, and the one-epoch training driver.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::losses::{ce_from_probs, elr_from_probs, gce_from_probs, softmax_in_place, ElrState, LossKind};
use crate::model::{backward, forward, forward_features, Gradients, Model, TuningMode};
use crate::rng::{self, tags};

/// SGD with heavy-ball momentum and weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    AdamW(AdamWConfig),
}

impl OptimizerConfig {
    /// Linear-probing default: SGD, lr 1e-2, momentum 0.9.
    pub fn default_lp() -> Self {
        OptimizerConfig::Sgd(SgdConfig {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 0.0,
        })
    }

    /// Fine-tuning default: AdamW, lr 1e-3.
    pub fn default_fft() -> Self {
        OptimizerConfig::AdamW(AdamWConfig::with_lr(1e-3))
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.lr,
            OptimizerConfig::AdamW(c) => c.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        match self {
            OptimizerConfig::Sgd(c) => {
                if !(c.lr >= 0.0 && c.lr.is_finite()) {
                    return bad("sgd lr must be finite and >= 0");
                }
                if !(0.0..1.0).contains(&c.momentum) {
                    return bad("sgd momentum must lie in [0, 1)");
                }
                if !(c.weight_decay >= 0.0) {
                    return bad("weight decay must be >= 0");
                }
            }
            OptimizerConfig::AdamW(c) => {
                if !(c.lr >= 0.0 && c.lr.is_finite()) {
                    return bad("adamw lr must be finite and >= 0");
                }
                if !(0.0..1.0).contains(&c.beta1) || !(0.0..1.0).contains(&c.beta2) {
                    return bad("adamw betas must lie in [0, 1)");
                }
                if !(c.eps > 0.0) {
                    return bad("adamw eps must be > 0");
                }
                if !(c.weight_decay >= 0.0) {
                    return bad("weight decay must be >= 0");
                }
            }
        }
        Ok(())
    }
}

/// Moment buffers for one parameter tensor. SGD uses only `first`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Slot {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Slot {
    fn ensure(&mut self, len: usize, second: bool) {
        if self.first.len() != len {
            self.first = vec![0.0; len];
        }
        if second && self.second.len() != len {
            self.second = vec![0.0; len];
        }
    }
}

fn check_step(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::contract("parameter and gradient lengths differ"));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::numeric("non-finite gradient"));
    }
    Ok(())
}

/// `v <- mu v + (g + wd theta)`, `theta <- theta - lr v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], slot: &mut Slot, config: &SgdConfig) -> Result<()> {
    check_step(params, grads)?;
    slot.ensure(params.len(), false);
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(slot.first.iter_mut()) {
        *v = config.momentum * *v + (g + config.weight_decay * *p);
        *p -= config.lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam update plus decoupled decay. `step` counts from 1.
pub fn adamw_step(params: &mut [f64], grads: &[f64], slot: &mut Slot, step: u64, config: &AdamWConfig) -> Result<()> {
    check_step(params, grads)?;
    if step == 0 {
        return Err(Error::contract("adamw step counter starts at 1"));
    }
    slot.ensure(params.len(), true);
    let c1 = 1.0 - config.beta1.powi(step as i32);
    let c2 = 1.0 - config.beta2.powi(step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(slot.first.iter_mut())
        .zip(slot.second.iter_mut())
    {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * *p);
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub slots: Vec<Slot>,
    pub step: u64,
}

/// An optimizer bound to the six parameter tensors of a [`Model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: OptimState {
                slots: vec![Slot::default(); 6],
                step: 0,
            },
        })
    }

    /// Applies one update. Only tensors with gradients move, so linear
    /// probing leaves the extractor untouched.
    pub fn apply(&mut self, model: &mut Model, grads: &Gradients) -> Result<()> {
        let gs = grads.tensors();
        for g in &gs {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("non-finite gradient"));
            }
        }
        self.state.step += 1;
        let step = self.state.step;
        let tensors = model.tensors_mut();
        for ((param, g), slot) in tensors.into_iter().zip(gs).zip(self.state.slots.iter_mut()) {
            match &self.config {
                OptimizerConfig::Sgd(c) => sgd_step(param, g, slot, c)?,
                OptimizerConfig::AdamW(c) => adamw_step(param, g, slot, step, c)?,
            }
        }
        model.touch();
        Ok(())
    }
}

/// A training objective with whatever per-sample state it carries.
#[derive(Clone, Debug)]
pub enum Objective {
    Ce,
    Gce(f64),
    Elr(ElrState),
}

impl Objective {
    /// `samples` is the row count of the dataset the ELR targets index into.
    pub fn new(kind: LossKind, samples: usize, classes: usize) -> Result<Self> {
        Ok(match kind {
            LossKind::Ce => Objective::Ce,
            LossKind::Gce(c) => {
                c.validate()?;
                Objective::Gce(c.q)
            }
            LossKind::Elr(c) => Objective::Elr(ElrState::new(samples, classes, c)?),
        })
    }

    /// Turns a batch of logits into per-row loss gradients in place and
    /// returns the per-row losses.
    fn evaluate(&mut self, logits: &mut Array2<f64>, labels: &[u32], rows: &[usize]) -> Result<Vec<f64>> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite logits during training"));
        }
        for mut row in logits.rows_mut() {
            softmax_in_place(row.as_slice_mut().unwrap());
        }
        if let Objective::Elr(state) = self {
            state.update_targets(logits.view(), rows)?;
        }
        let mut losses = Vec::with_capacity(rows.len());
        for (mut row, &i) in logits.rows_mut().into_iter().zip(rows) {
            let g = row.as_slice_mut().unwrap();
            let y = labels[i] as usize;
            losses.push(match self {
                Objective::Ce => ce_from_probs(g, y),
                Objective::Gce(q) => gce_from_probs(g, y, *q),
                Objective::Elr(state) => {
                    let t = state.targets().row(i);
                    elr_from_probs(g, y, t.as_slice().unwrap(), state.config.lambda)
                }
            });
        }
        Ok(losses)
    }
}

/// Rows to train on. `indices`, when set, restricts the epoch to a subset;
/// otherwise every row is used.
#[derive(Clone, Copy, Debug)]
pub struct TrainSet<'a> {
    pub inputs: ArrayView2<'a, f64>,
    pub labels: &'a [u32],
    pub indices: Option<&'a [usize]>,
    /// Rows are already extractor outputs; only the head runs.
    pub precomputed_features: bool,
}

impl<'a> TrainSet<'a> {
    pub fn raw(inputs: ArrayView2<'a, f64>, labels: &'a [u32]) -> Self {
        Self {
            inputs,
            labels,
            indices: None,
            precomputed_features: false,
        }
    }

    pub fn features(features: ArrayView2<'a, f64>, labels: &'a [u32]) -> Self {
        Self {
            precomputed_features: true,
            ..Self::raw(features, labels)
        }
    }

    pub fn with_indices(self, indices: &'a [usize]) -> Self {
        Self {
            indices: Some(indices),
            ..self
        }
    }

    fn rows(&self) -> Vec<usize> {
        match self.indices {
            Some(ix) => ix.to_vec(),
            None => (0..self.inputs.nrows()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// Mean loss over the epoch, each batch measured before its update.
    pub mean_loss: f64,
    /// Fraction of visited rows whose argmax matched the given label.
    pub accuracy: f64,
    pub samples: usize,
}

/// One pass over `data` in a seeded shuffled order. The last partial batch
/// is kept.
pub fn train_epoch(
    model: &mut Model,
    data: &TrainSet<'_>,
    objective: &mut Objective,
    optimizer: &mut Optimizer,
    batch_size: usize,
    seed: u64,
    mode: TuningMode,
) -> Result<EpochStats> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    if data.labels.len() != data.inputs.nrows() {
        return Err(Error::contract("labels and inputs differ in length"));
    }
    if data.precomputed_features && mode == TuningMode::Fft {
        return Err(Error::contract("full fine-tuning needs raw inputs, not cached features"));
    }
    let mut order = data.rows();
    if let Some(&bad) = order.iter().find(|&&i| i >= data.inputs.nrows()) {
        return Err(Error::contract(format!("row index {bad} out of range")));
    }
    order.shuffle(&mut rng::stream(seed, tags::SHUFFLE));

    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for rows in order.chunks(batch_size) {
        let batch = data.inputs.select(Axis(0), rows);
        let (mut logits, cache) = if data.precomputed_features {
            forward_features(model, batch.view())?
        } else {
            forward(model, batch.view(), mode)?
        };
        correct += logits
            .rows()
            .into_iter()
            .zip(rows)
            .filter(|(row, &i)| argmax(row.as_slice().unwrap()) == data.labels[i] as usize)
            .count();
        let losses = objective.evaluate(&mut logits, data.labels, rows)?;
        loss_sum += losses.iter().sum::<f64>();
        let grads = backward(model, &cache, logits.view())?;
        optimizer.apply(model, &grads)?;
    }
    let n = order.len();
    let stats = EpochStats {
        mean_loss: if n == 0 { 0.0 } else { loss_sum / n as f64 },
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        samples: n,
    };
    if !stats.mean_loss.is_finite() {
        return Err(Error::numeric("non-finite epoch loss"));
    }
    Ok(stats)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = k;
        }
    }
    best
}

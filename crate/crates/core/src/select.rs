//! Small-loss clean-sample selection.
//!
//! Per-sample cross-entropy losses are min-max normalized, a two-component
//! 1-D Gaussian mixture is fitted per class by EM, and a sample is a clean
//! candidate when the posterior of the low-mean component exceeds `tau`. The
//! clean subset then takes the same number of candidates from every class.

use ndarray::Axis;
use rand::seq::index;

use crate::dataset::{Dataset, UNKNOWN_LABEL};
use crate::error::{Error, Result};
use crate::losses::{ce_from_probs, softmax_in_place};
use crate::model::Model;
use crate::rng::{self, tags};

/// Floor on each component variance after every M-step.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Components closer than this count as a degenerate fit.
pub const DEGENERATE_GAP: f64 = 1e-3;

const EVAL_CHUNK: usize = 1024;

/// Per-sample losses with their min-max normalized copy.
#[derive(Clone, Debug, PartialEq)]
pub struct LossVector {
    pub values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

impl LossVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite per-sample loss"));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = max - min;
        let normalized = values
            .iter()
            .map(|&v| if span > 0.0 { (v - min) / span } else { 0.0 })
            .collect();
        Ok(Self { values, normalized, min, max })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cross-entropy loss of every row against its given label. Parameters are
/// not touched.
pub fn per_sample_losses(model: &Model, dataset: &Dataset) -> Result<LossVector> {
    let labels = dataset.given_labels();
    let mut out = Vec::with_capacity(dataset.len());
    for (k, chunk) in dataset.inputs().axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
        let mut logits = model.logits(chunk)?;
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite logits while scoring losses"));
        }
        for (j, mut row) in logits.rows_mut().into_iter().enumerate() {
            let p = row.as_slice_mut().unwrap();
            softmax_in_place(p);
            out.push(ce_from_probs(p, labels[k * EVAL_CHUNK + j] as usize));
        }
    }
    LossVector::new(out)
}

/// Two-component 1-D Gaussian mixture, component 0 having the lower mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gmm1D {
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
}

impl Gmm1D {
    pub fn is_degenerate(&self) -> bool {
        (self.means[1] - self.means[0]).abs() < DEGENERATE_GAP
    }

    /// `ln w_k - ln sqrt(2 pi var_k)`.
    fn log_norm(&self, k: usize) -> f64 {
        self.weights[k].ln() - 0.5 * (2.0 * std::f64::consts::PI * self.variances[k]).ln()
    }

    fn log_joint(&self, k: usize, v: f64) -> f64 {
        let d = v - self.means[k];
        self.log_norm(k) - d * d / (2.0 * self.variances[k])
    }

    /// `ln P(low | v) - ln P(high | v)`.
    pub fn log_odds_low(&self, v: f64) -> f64 {
        self.log_joint(0, v) - self.log_joint(1, v)
    }
}

/// Posterior probability that `value` came from the low-mean component.
pub fn posterior_low(gmm: &Gmm1D, value: f64) -> Result<f64> {
    if gmm.is_degenerate() {
        return Err(Error::contract("posterior of a degenerate mixture"));
    }
    Ok(logistic(gmm.log_odds_low(value)))
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmFit {
    pub gmm: Gmm1D,
    /// Mean log-likelihood at the initial parameters and after each EM step.
    pub log_likelihood: Vec<f64>,
    pub degenerate: bool,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fits the mixture by EM. Means start at the 10th and 90th percentiles,
/// weights at one half, both variances at the sample variance.
pub fn fit_gmm1d(values: &[f64], config: &EmConfig) -> Result<GmmFit> {
    if values.is_empty() {
        return Err(Error::config("cannot fit a mixture to no values"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite value in mixture fit"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        let gmm = Gmm1D {
            means: [mean, mean],
            variances: [VARIANCE_FLOOR; 2],
            weights: [0.5, 0.5],
        };
        return Ok(GmmFit {
            gmm,
            log_likelihood: Vec::new(),
            degenerate: true,
        });
    }

    let mut gmm = Gmm1D {
        means: [percentile(&sorted, 0.1), percentile(&sorted, 0.9)],
        variances: [var, var],
        weights: [0.5, 0.5],
    };
    let mut trace = Vec::with_capacity(config.max_iters + 1);
    for iter in 0..=config.max_iters {
        // E-step fused with the M-step sums; also yields the log-likelihood
        // of the current parameters.
        let c = [gmm.log_norm(0), gmm.log_norm(1)];
        let h = [0.5 / gmm.variances[0], 0.5 / gmm.variances[1]];
        let (mut ll, mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0, 0.0);
        let (mut t1, mut t2) = (0.0, 0.0);
        for &v in values {
            let a = c[0] - (v - gmm.means[0]).powi(2) * h[0];
            let b = c[1] - (v - gmm.means[1]).powi(2) * h[1];
            // r = P(low | v) = 1 / (1 + e^(b - a)), evaluated on the stable side.
            let (r, lse) = if a >= b {
                let e = (b - a).exp();
                (1.0 / (1.0 + e), a + (1.0 + e).ln())
            } else {
                let e = (a - b).exp();
                (e / (1.0 + e), b + (1.0 + e).ln())
            };
            ll += lse;
            s0 += r;
            s1 += r * v;
            s2 += r * v * v;
            t1 += v;
            t2 += v * v;
        }
        let ll = ll / n;
        let converged = trace.last().is_some_and(|&prev| ll - prev < config.tol);
        trace.push(ll);
        if converged || iter == config.max_iters {
            break;
        }
        let mut next = gmm;
        let sums = [(s0, s1, s2), (n - s0, t1 - s1, t2 - s2)];
        for (k, &(nk, sv, svv)) in sums.iter().enumerate() {
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let mu = sv / nk;
            next.means[k] = mu;
            next.variances[k] = (svv / nk - mu * mu).max(VARIANCE_FLOOR);
            next.weights[k] = nk / n;
        }
        let total = next.weights[0] + next.weights[1];
        next.weights = [next.weights[0] / total, next.weights[1] / total];
        gmm = next;
    }
    if gmm.means[0] > gmm.means[1] {
        gmm.means.swap(0, 1);
        gmm.variances.swap(0, 1);
        gmm.weights.swap(0, 1);
    }
    Ok(GmmFit {
        degenerate: gmm.is_degenerate(),
        gmm,
        log_likelihood: trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionConfig {
    pub tau: f64,
    /// Classes with fewer given-label rows reuse the global fit.
    pub min_class_fit: usize,
    /// Fit one mixture per class (true) or a single global one.
    pub per_class: bool,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            tau: 0.6,
            min_class_fit: 20,
            per_class: true,
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config(format!("tau must lie in [0, 1), got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult {
    /// Selected row indices, ascending.
    pub indices: Vec<usize>,
    /// Candidates per class before any fallback.
    pub candidate_counts: Vec<usize>,
    /// Rows taken from every class.
    pub quota: usize,
    pub purity: Option<f64>,
    /// Classes whose fit was degenerate and used the below-mean rule.
    pub degenerate: Vec<bool>,
    /// Classes that had no candidate and contributed their lowest-loss row.
    pub fallback: Vec<bool>,
}

/// Candidate rows of one class.
fn class_candidates(rows: &[usize], losses: &LossVector, fit: &GmmFit, tau: f64) -> Vec<usize> {
    let norm = &losses.normalized;
    if fit.degenerate {
        let mean = rows.iter().map(|&i| norm[i]).sum::<f64>() / rows.len() as f64;
        return rows.iter().copied().filter(|&i| norm[i] < mean).collect();
    }
    // posterior > tau, compared on the log-odds scale so tau = 0 admits
    // every row.
    let threshold = (tau / (1.0 - tau)).ln();
    rows.iter()
        .copied()
        .filter(|&i| fit.gmm.log_odds_low(norm[i]) > threshold)
        .collect()
}

/// Builds the class-balanced clean subset.
pub fn select_clean(
    losses: &LossVector,
    given_labels: &[u32],
    classes: usize,
    true_labels: Option<&[u32]>,
    config: &SelectionConfig,
) -> Result<SelectionResult> {
    config.validate()?;
    if classes == 0 || losses.is_empty() {
        return Err(Error::config("selection needs at least one class and one sample"));
    }
    if given_labels.len() != losses.len() {
        return Err(Error::contract("labels and losses differ in length"));
    }
    let mut by_class = vec![Vec::new(); classes];
    for (i, &y) in given_labels.iter().enumerate() {
        let bucket = by_class
            .get_mut(y as usize)
            .ok_or_else(|| Error::contract(format!("label {y} out of range")))?;
        bucket.push(i);
    }

    let mut global: Option<GmmFit> = None;
    let mut candidates = Vec::with_capacity(classes);
    let mut degenerate = vec![false; classes];
    for (c, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            candidates.push(Vec::new());
            continue;
        }
        let fit = if config.per_class && rows.len() >= config.min_class_fit {
            let vals: Vec<f64> = rows.iter().map(|&i| losses.normalized[i]).collect();
            fit_gmm1d(&vals, &config.em)?
        } else {
            if global.is_none() {
                global = Some(fit_gmm1d(&losses.normalized, &config.em)?);
            }
            global.clone().unwrap()
        };
        degenerate[c] = fit.degenerate;
        candidates.push(class_candidates(rows, losses, &fit, config.tau));
    }

    let present: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    if present.len() < classes {
        log::warn!("{} classes have no samples and are left out", classes - present.len());
    }
    let candidate_counts: Vec<usize> = candidates.iter().map(Vec::len).collect();
    let mut quota = present.iter().map(|&c| candidate_counts[c]).min().unwrap_or(0);
    let mut fallback = vec![false; classes];
    if quota == 0 {
        for &c in &present {
            if candidates[c].is_empty() {
                fallback[c] = true;
                let best = by_class[c]
                    .iter()
                    .copied()
                    .min_by(|&a, &b| losses.values[a].total_cmp(&losses.values[b]))
                    .unwrap();
                candidates[c] = vec![best];
            }
        }
        log::warn!("empty clean candidate set; falling back to one sample per class");
        quota = 1;
    }

    let mut indices = Vec::with_capacity(quota * present.len());
    for &c in &present {
        let pool = &candidates[c];
        let mut r = rng::stream(rng::derive_seed(config.seed, c as u64), tags::SELECT);
        indices.extend(index::sample(&mut r, pool.len(), quota).into_iter().map(|k| pool[k]));
    }
    indices.sort_unstable();
    let purity = true_labels.and_then(|t| purity(&indices, given_labels, t));
    Ok(SelectionResult {
        indices,
        candidate_counts,
        quota,
        purity,
        degenerate,
        fallback,
    })
}

/// Fraction of `selected` rows whose given label equals the true label. Rows
/// with an unknown true label are ignored; `None` when none remain.
pub fn purity(selected: &[usize], given_labels: &[u32], true_labels: &[u32]) -> Option<f64> {
    let (mut known, mut clean) = (0usize, 0usize);
    for &i in selected {
        if true_labels[i] == UNKNOWN_LABEL {
            continue;
        }
        known += 1;
        if given_labels[i] == true_labels[i] {
            clean += 1;
        }
    }
    (known > 0).then(|| clean as f64 / known as f64)
}

/// One `epoch,class,candidates,N,purity` line per class; purity is empty
/// when unknown.
pub fn selection_dump_lines(
    epoch: usize,
    result: &SelectionResult,
    given_labels: &[u32],
    true_labels: Option<&[u32]>,
) -> Vec<String> {
    (0..result.candidate_counts.len())
        .map(|c| {
            let rows: Vec<usize> = result
                .indices
                .iter()
                .copied()
                .filter(|&i| given_labels[i] as usize == c)
                .collect();
            let p = true_labels
                .and_then(|t| purity(&rows, given_labels, t))
                .map(|p| format!("{p:.6}"))
                .unwrap_or_default();
            format!("{epoch},{c},{},{},{p}", result.candidate_counts[c], result.quota)
        })
        .collect()
}

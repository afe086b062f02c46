//! Classification losses on logits, each returning the loss value and its
//! gradient with respect to the logits.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Probability floor inside the cross-entropy logarithm.
pub const CE_PROB_FLOOR: f64 = 1e-12;
/// Lower clamp on the true-class probability in GCE.
pub const GCE_PROB_FLOOR: f64 = 1e-7;
/// Lower clamp on `1 - <p, t>` before the ELR logarithm.
pub const ELR_INNER_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub dlogits: Vec<f64>,
}

/// Max-shifted softmax. Entries equal to `-inf` get probability zero.
pub(crate) fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    values.iter_mut().for_each(|v| *v /= total);
}

pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(p)
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::contract("empty logit vector"));
    }
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numeric("non-finite logit"))
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::contract(format!("label {label} out of range for {classes} classes")))
    }
}

/// Cross-entropy: writes `p - onehot(label)` into `grad` (which on entry holds
/// the probabilities) and returns `-ln p[label]`.
pub(crate) fn ce_from_probs(grad: &mut [f64], label: usize) -> f64 {
    let loss = -grad[label].max(CE_PROB_FLOOR).ln();
    grad[label] -= 1.0;
    loss
}

pub fn ce_loss_grad(logits: &[f64], label: usize) -> Result<LossGrad> {
    check_label(label, logits.len())?;
    let mut g = softmax_probs(logits)?;
    let loss = ce_from_probs(&mut g, label);
    Ok(LossGrad { loss, dlogits: g })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GceConfig {
    pub q: f64,
}

impl Default for GceConfig {
    fn default() -> Self {
        Self { q: 0.7 }
    }
}

impl GceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q > 0.0 && self.q <= 1.0 {
            Ok(())
        } else {
            Err(Error::config(format!("GCE q must lie in (0, 1], got {}", self.q)))
        }
    }
}

pub(crate) fn gce_from_probs(grad: &mut [f64], label: usize, q: f64) -> f64 {
    let py = grad[label];
    if py < GCE_PROB_FLOOR {
        // Clamped region: constant loss.
        grad.iter_mut().for_each(|g| *g = 0.0);
        return (1.0 - GCE_PROB_FLOOR.powf(q)) / q;
    }
    let py = py.min(1.0);
    let pq = py.powf(q);
    // d/dz_k (1 - p_y^q)/q = -p_y^q (delta_ky - p_k)
    for (k, g) in grad.iter_mut().enumerate() {
        let delta = if k == label { 1.0 } else { 0.0 };
        *g = -pq * (delta - *g);
    }
    (1.0 - pq) / q
}

/// Generalized cross entropy `(1 - p_y^q) / q`.
pub fn gce_loss_grad(logits: &[f64], label: usize, q: f64) -> Result<LossGrad> {
    GceConfig { q }.validate()?;
    check_label(label, logits.len())?;
    let mut g = softmax_probs(logits)?;
    let loss = gce_from_probs(&mut g, label, q);
    Ok(LossGrad { loss, dlogits: g })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElrConfig {
    /// Moving-average momentum of the targets.
    pub beta: f64,
    /// Regularizer weight.
    pub lambda: f64,
}

impl Default for ElrConfig {
    fn default() -> Self {
        Self { beta: 0.7, lambda: 3.0 }
    }
}

impl ElrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("ELR beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!("ELR lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Per-sample moving averages of the model's predicted distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ElrState {
    targets: Array2<f64>,
    pub config: ElrConfig,
}

impl ElrState {
    pub fn new(samples: usize, classes: usize, config: ElrConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            targets: Array2::zeros((samples, classes)),
            config,
        })
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    /// `t[i] <- beta * t[i] + (1 - beta) * p` for each batch row; other rows
    /// are left alone.
    pub fn update_targets(&mut self, probs: ArrayView2<'_, f64>, indices: &[usize]) -> Result<()> {
        if probs.nrows() != indices.len() || probs.ncols() != self.targets.ncols() {
            return Err(Error::contract("ELR batch shape does not match its indices"));
        }
        let n = self.targets.nrows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::contract(format!("ELR index {bad} out of range for {n} samples")));
        }
        let beta = self.config.beta;
        for (row, &i) in probs.rows().into_iter().zip(indices) {
            let mut t = self.targets.row_mut(i);
            t.zip_mut_with(&row, |t, &p| *t = beta * *t + (1.0 - beta) * p);
        }
        Ok(())
    }
}

pub(crate) fn elr_from_probs(grad: &mut [f64], label: usize, target: &[f64], lambda: f64) -> f64 {
    let inner: f64 = grad.iter().zip(target).map(|(p, t)| p * t).sum();
    let reg_grads: Option<Vec<f64>> = (lambda != 0.0 && 1.0 - inner >= ELR_INNER_FLOOR).then(|| {
        let scale = -lambda / (1.0 - inner);
        grad.iter()
            .zip(target)
            .map(|(p, t)| scale * p * (t - inner))
            .collect()
    });
    let ce = ce_from_probs(grad, label);
    if lambda == 0.0 {
        return ce;
    }
    let gap = 1.0 - inner;
    match reg_grads {
        Some(rg) => {
            grad.iter_mut().zip(rg).for_each(|(g, r)| *g += r);
            ce + lambda * gap.ln()
        }
        None => {
            log::debug!("ELR inner product clamped (1 - <p,t> = {gap:e})");
            ce + lambda * ELR_INNER_FLOOR.ln()
        }
    }
}

/// Cross entropy plus `lambda * ln(1 - <p, t>)`.
pub fn elr_loss_grad(logits: &[f64], label: usize, target_row: &[f64], lambda: f64) -> Result<LossGrad> {
    check_label(label, logits.len())?;
    if target_row.len() != logits.len() {
        return Err(Error::contract("ELR target width differs from logits"));
    }
    if !(lambda >= 0.0) {
        return Err(Error::config("ELR lambda must be >= 0"));
    }
    let mut g = softmax_probs(logits)?;
    let loss = elr_from_probs(&mut g, label, target_row, lambda);
    Ok(LossGrad { loss, dlogits: g })
}

/// The training objective used for one stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossKind {
    Ce,
    Gce(GceConfig),
    Elr(ElrConfig),
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Gce(_) => "gce",
            LossKind::Elr(_) => "elr",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_probs(&[2.0; 4]).unwrap(), vec![0.25; 4]);
        let p = softmax_probs(&[0.0, 3f64.ln()]).unwrap();
        assert!(close(p[0], 0.25, 1e-15) && close(p[1], 0.75, 1e-15));
        let a = softmax_probs(&[0.3, -1.2, 4.0]).unwrap();
        let b = softmax_probs(&[100.3, 98.8, 104.0]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-14));
        }
        assert!(close(a.iter().sum::<f64>(), 1.0, 1e-12));
        assert!(matches!(softmax_probs(&[0.0, f64::NAN]), Err(Error::Numeric(_))));
    }

    #[test]
    fn ce_examples() {
        assert!(ce_loss_grad(&[0.0; 4], 1).unwrap().loss - 4f64.ln() < 1e-12);
        assert!((ce_loss_grad(&[0.0; 4], 1).unwrap().loss - 1.386294).abs() < 1e-6);
        assert!(ce_loss_grad(&[50.0, 0.0, 0.0], 0).unwrap().loss < 1e-6);
        assert!(matches!(ce_loss_grad(&[0.0; 3], 3), Err(Error::Contract(_))));
    }

    #[test]
    fn gce_examples() {
        assert!(gce_loss_grad(&[60.0, 0.0], 0, 0.7).unwrap().loss.abs() < 1e-12);
        // p_y = 0.5 from equal logits; (1 - 0.5^0.7) / 0.7
        let l = gce_loss_grad(&[0.0, 0.0], 0, 0.7).unwrap().loss;
        assert!((l - 0.549183).abs() < 1e-6, "{l}");
        let logits = [0.4, -0.2, 1.1];
        let p = softmax_probs(&logits).unwrap();
        let mae = gce_loss_grad(&logits, 2, 1.0).unwrap().loss;
        assert!(close(mae, 1.0 - p[2], 1e-15));
        assert!(matches!(gce_loss_grad(&logits, 0, 0.0), Err(Error::Config(_))));
        assert!(gce_loss_grad(&logits, 0, 1.5).is_err());
    }

    #[test]
    fn gce_bounded() {
        let l = gce_loss_grad(&[-80.0, 80.0], 0, 0.3).unwrap();
        assert!(l.loss <= 1.0 / 0.3 && l.loss >= 0.0);
        assert!(l.dlogits.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn elr_target_updates() {
        let mut s = ElrState::new(3, 2, ElrConfig { beta: 0.7, lambda: 3.0 }).unwrap();
        let p = ndarray::arr2(&[[1.0, 0.0]]);
        s.update_targets(p.view(), &[1]).unwrap();
        s.update_targets(p.view(), &[1]).unwrap();
        assert!(close(s.targets()[[1, 0]], 0.51, 1e-15));
        assert_eq!(s.targets()[[1, 1]], 0.0);
        assert_eq!(s.targets()[[0, 0]], 0.0);
        assert!(s.update_targets(p.view(), &[3]).is_err());

        let mut frozen = ElrState::new(1, 2, ElrConfig { beta: 1.0, lambda: 1.0 }).unwrap();
        frozen.update_targets(ndarray::arr2(&[[0.2, 0.8]]).view(), &[0]).unwrap();
        assert_eq!(frozen.targets()[[0, 1]], 0.0);
        let mut copy = ElrState::new(1, 2, ElrConfig { beta: 0.0, lambda: 1.0 }).unwrap();
        copy.update_targets(ndarray::arr2(&[[0.2, 0.8]]).view(), &[0]).unwrap();
        assert_eq!(copy.targets().row(0).to_vec(), vec![0.2, 0.8]);
    }

    #[test]
    fn elr_reduces_to_ce() {
        let logits = [0.3, -0.7, 1.9, 0.0];
        let ce = ce_loss_grad(&logits, 2).unwrap();
        let elr = elr_loss_grad(&logits, 2, &[0.1, 0.2, 0.3, 0.4], 0.0).unwrap();
        assert_eq!(ce.loss.to_bits(), elr.loss.to_bits());
        assert_eq!(ce.dlogits, elr.dlogits);
        let disjoint = elr_loss_grad(&logits, 2, &[0.0; 4], 3.0).unwrap();
        assert_eq!(disjoint.loss, ce.loss);
    }

    #[test]
    fn elr_clamp_keeps_loss_finite() {
        let l = elr_loss_grad(&[80.0, 0.0], 0, &[1.0, 0.0], 3.0).unwrap();
        assert!(l.loss.is_finite());
    }

    proptest! {
        #[test]
        fn gce_decreases_in_true_prob(a in 0.001f64..0.999, b in 0.001f64..0.999, q in 0.05f64..=1.0) {
            prop_assume!((a - b).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            // Two-class logits that give p_y exactly lo / hi.
            let loss = |p: f64| gce_loss_grad(&[(p / (1.0 - p)).ln(), 0.0], 0, q).unwrap().loss;
            prop_assert!(loss(lo) > loss(hi));
        }

        #[test]
        fn gce_approaches_ce_for_small_q(py in 0.1f64..0.9) {
            let logits = [(py / (1.0 - py)).ln(), 0.0];
            let gce = gce_loss_grad(&logits, 0, 1e-3).unwrap().loss;
            let ce = ce_loss_grad(&logits, 0).unwrap().loss;
            prop_assert!((gce - ce).abs() < 5e-3);
        }

        #[test]
        fn elr_targets_stay_subprobability(steps in 1usize..20, beta in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut r = rng::stream(seed, 0);
            let mut s = ElrState::new(2, 3, ElrConfig { beta, lambda: 1.0 }).unwrap();
            for _ in 0..steps {
                let p = softmax_probs(&[r.random::<f64>(), r.random::<f64>(), r.random::<f64>()]).unwrap();
                s.update_targets(ndarray::Array2::from_shape_vec((1, 3), p).unwrap().view(), &[0]).unwrap();
            }
            let row = s.targets().row(0);
            prop_assert!(row.iter().all(|&t| t >= 0.0));
            prop_assert!(row.sum() <= 1.0 + 1e-9);
        }
    }
}

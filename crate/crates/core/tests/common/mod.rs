//! Test-side oracles: naive forward passes, closed-form losses and central
//! finite differences. Nothing here calls into the library's gradient code.

#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use turnlnl::losses::{ce_loss_grad, elr_loss_grad, gce_loss_grad};
use turnlnl::model::{backward, forward, ExtractorMode, Model, TuningMode};

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(r);
            scale * g
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, or the plain difference when both are
/// near zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-10 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn ce_value(z: &[f64], y: usize) -> f64 {
    -softmax(z)[y].ln()
}

pub fn gce_value(z: &[f64], y: usize, q: f64) -> f64 {
    (1.0 - softmax(z)[y].powf(q)) / q
}

pub fn elr_value(z: &[f64], y: usize, t: &[f64], lambda: f64) -> f64 {
    let p = softmax(z);
    let inner: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
    ce_value(z, y) + lambda * (1.0 - inner).ln()
}

#[derive(Clone, Copy, Debug)]
pub enum LossUnderTest {
    Ce,
    Gce(f64),
    Elr,
}

/// Relative gradient errors of one loss on `instances` random logit
/// vectors, plus the largest value mismatch against the closed form.
pub fn loss_gradient_errors(which: LossUnderTest, instances: usize, seed: u64) -> (Vec<f64>, f64) {
    let mut r = rng(seed);
    let mut errors = Vec::with_capacity(instances);
    let mut value_err: f64 = 0.0;
    for _ in 0..instances {
        let c = r.random_range(2..=12);
        let z = normal_vec(&mut r, c, 2.0);
        let y = r.random_range(0..c);
        // A sub-probability target keeps 1 - <p, t> well away from the clamp.
        let raw: Vec<f64> = (0..c).map(|_| r.random::<f64>()).collect();
        let mass = 0.8 * r.random::<f64>();
        let total: f64 = raw.iter().sum();
        let t: Vec<f64> = raw.iter().map(|v| mass * v / total).collect();
        let lambda = 3.0;
        let (lib, oracle): (_, Box<dyn Fn(&[f64]) -> f64>) = match which {
            LossUnderTest::Ce => (ce_loss_grad(&z, y).unwrap(), Box::new(move |v: &[f64]| ce_value(v, y))),
            LossUnderTest::Gce(q) => (
                gce_loss_grad(&z, y, q).unwrap(),
                Box::new(move |v: &[f64]| gce_value(v, y, q)),
            ),
            LossUnderTest::Elr => {
                let tt = t.clone();
                (
                    elr_loss_grad(&z, y, &t, lambda).unwrap(),
                    Box::new(move |v: &[f64]| elr_value(v, y, &tt, lambda)),
                )
            }
        };
        value_err = value_err.max((lib.loss - oracle(&z)).abs());
        let numeric = central_diff(&oracle, &z);
        errors.push(rel_err(&lib.dlogits, &numeric));
    }
    (errors, value_err)
}

/// Mutable view of parameter tensor `k` in the order head W, head b, W1, b1,
/// W2, b2.
pub fn param_mut(model: &mut Model, k: usize) -> &mut [f64] {
    match k {
        0 => model.head.w.as_slice_mut().unwrap(),
        1 => model.head.b.as_slice_mut().unwrap(),
        2 => model.extractor.w1.as_slice_mut().unwrap(),
        3 => model.extractor.b1.as_slice_mut().unwrap(),
        4 => model.extractor.w2.as_slice_mut().unwrap(),
        _ => model.extractor.b2.as_slice_mut().unwrap(),
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// Extractor pre-activations computed with plain loops.
pub fn naive_pre_hidden(model: &Model, x: &Array2<f64>) -> Array2<f64> {
    let e = &model.extractor;
    Array2::from_shape_fn((x.nrows(), e.w1.nrows()), |(i, j)| {
        e.b1[j] + (0..x.ncols()).map(|k| e.w1[[j, k]] * x[[i, k]]).sum::<f64>()
    })
}

/// Logits computed with plain loops.
pub fn naive_logits(model: &Model, x: &Array2<f64>) -> Array2<f64> {
    let e = &model.extractor;
    let features: Array2<f64> = match e.mode {
        ExtractorMode::Identity => x.clone(),
        ExtractorMode::Mlp | ExtractorMode::ResidualAdapter => {
            let pre = naive_pre_hidden(model, x);
            Array2::from_shape_fn((x.nrows(), e.w2.nrows()), |(i, j)| {
                let mlp = e.b2[j] + (0..pre.ncols()).map(|k| e.w2[[j, k]] * relu(pre[[i, k]])).sum::<f64>();
                if e.mode == ExtractorMode::ResidualAdapter {
                    x[[i, j]] + mlp
                } else {
                    mlp
                }
            })
        }
    };
    let h = &model.head;
    Array2::from_shape_fn((x.nrows(), h.w.nrows()), |(i, c)| {
        h.b[c] + (0..features.ncols()).map(|k| h.w[[c, k]] * features[[i, k]]).sum::<f64>()
    })
}

fn batch_mean_ce(model: &Model, x: &Array2<f64>, labels: &[usize]) -> f64 {
    let logits = naive_logits(model, x);
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| ce_value(logits.row(i).as_slice().unwrap(), y))
        .sum::<f64>()
        / labels.len() as f64
}

/// A random small model with every parameter (adapter output layer and head
/// included) drawn away from zero.
pub fn random_model(r: &mut ChaCha8Rng, mode: ExtractorMode) -> Model {
    let input = r.random_range(2..=6);
    let hidden = r.random_range(2..=7);
    let feature = if mode == ExtractorMode::Mlp { r.random_range(2..=5) } else { input };
    let classes = r.random_range(2..=5);
    let mut m = |rows: usize, cols: usize| Array2::from_shape_vec((rows, cols), normal_vec(r, rows * cols, 0.8)).unwrap();
    let w1 = m(hidden, input);
    let w2 = m(feature, hidden);
    let w = m(classes, feature);
    let b1 = Array1::from(normal_vec(r, hidden, 0.3));
    let b2 = Array1::from(normal_vec(r, feature, 0.3));
    let b = Array1::from(normal_vec(r, classes, 0.3));
    Model::new(
        turnlnl::model::Extractor { mode, w1, b1, w2, b2 },
        turnlnl::model::LinearHead { w, b },
    )
    .unwrap()
}

/// Relative gradient errors of the batch-mean CE objective through the full
/// model. Instances with a pre-activation within 1e-3 of the ReLU kink are
/// redrawn, as finite differences are meaningless there.
pub fn model_gradient_errors(mode: TuningMode, extractor: ExtractorMode, instances: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    let mut errors = Vec::with_capacity(instances);
    while errors.len() < instances {
        let model = random_model(&mut r, extractor);
        let batch = r.random_range(1..=5);
        let input = model.extractor.w1.ncols();
        let x = Array2::from_shape_vec((batch, input), normal_vec(&mut r, batch * input, 1.0)).unwrap();
        if naive_pre_hidden(&model, &x).iter().any(|v| v.abs() < 1e-3) {
            continue;
        }
        let labels: Vec<usize> = (0..batch).map(|_| r.random_range(0..model.head.w.nrows())).collect();

        let (logits, cache) = forward(&model, x.view(), mode).unwrap();
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for (i, &y) in labels.iter().enumerate() {
            let g = ce_loss_grad(logits.row(i).as_slice().unwrap(), y).unwrap();
            dlogits.row_mut(i).assign(&Array1::from(g.dlogits));
        }
        let grads = backward(&model, &cache, dlogits.view()).unwrap();
        let mut analytic: Vec<Vec<f64>> = vec![grads.head.w.as_slice().unwrap().to_vec(), grads.head.b.to_vec()];
        match (&grads.extractor, mode) {
            (None, TuningMode::Lp) => {}
            (Some(e), TuningMode::Fft) => {
                analytic.extend([e.w1.as_slice().unwrap().to_vec(), e.b1.to_vec(), e.w2.as_slice().unwrap().to_vec(), e.b2.to_vec()]);
            }
            _ => panic!("extractor gradients present in the wrong mode"),
        }

        let mut flat_analytic = Vec::new();
        let mut flat_numeric = Vec::new();
        for (k, a) in analytic.iter().enumerate() {
            let mut probe = model.clone();
            let base = param_mut(&mut probe, k).to_vec();
            let numeric = central_diff(
                |v: &[f64]| {
                    let mut m = model.clone();
                    param_mut(&mut m, k).copy_from_slice(v);
                    batch_mean_ce(&m, &x, &labels)
                },
                &base,
            );
            flat_analytic.extend_from_slice(a);
            flat_numeric.extend(numeric);
        }
        errors.push(rel_err(&flat_analytic, &flat_numeric));
    }
    errors
}

/// Balanced clean raw dataset of `classes * per_class` rows with standard
/// normal inputs.
pub fn balanced_dataset(classes: usize, per_class: usize, dim: usize, seed: u64) -> turnlnl::dataset::Dataset {
    let mut r = rng(seed);
    let n = classes * per_class;
    let x = Array2::from_shape_vec((n, dim), normal_vec(&mut r, n * dim, 1.0)).unwrap();
    let labels: Vec<u32> = (0..n).map(|i| (i / per_class) as u32).collect();
    turnlnl::dataset::Dataset::clean(x, labels, classes, turnlnl::dataset::DataKind::Raw).unwrap()
}

/// Chi-square statistic of observed counts against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum()
}

/// Upper `alpha` quantile of chi-square with `k` degrees of freedom
/// (Wilson-Hilferty), given the matching standard normal quantile `z`.
pub fn chi_square_quantile(k: f64, z: f64) -> f64 {
    k * (1.0 - 2.0 / (9.0 * k) + z * (2.0 / (9.0 * k)).sqrt()).powi(3)
}

/// Draws `n` values from `w0 N(m0, s0^2) + (1 - w0) N(m1, s1^2)`.
pub fn mixture_draws(n: usize, w0: f64, m0: f64, s0: f64, m1: f64, s1: f64, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut r);
            if r.random::<f64>() < w0 {
                m0 + s0 * g
            } else {
                m1 + s1 * g
            }
        })
        .collect()
}

/// Mean log-likelihood of a two-component mixture, evaluated directly.
pub fn mixture_log_likelihood(values: &[f64], means: [f64; 2], variances: [f64; 2], weights: [f64; 2]) -> f64 {
    let pdf = |v: f64, k: usize| {
        weights[k] * (-(v - means[k]).powi(2) / (2.0 * variances[k])).exp() / (2.0 * std::f64::consts::PI * variances[k]).sqrt()
    };
    values.iter().map(|&v| (pdf(v, 0) + pdf(v, 1)).ln()).sum::<f64>() / values.len() as f64
}

//! The two-step procedure (linear probing under GCE, then repeated clean-set
//! selection and full fine-tuning under CE), the single-loss baselines and
//! evaluation.

use std::time::Instant;

use ndarray::{Array2, Axis};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::losses::{GceConfig, LossKind};
use crate::model::{Model, TuningMode};
use crate::optim::{argmax, train_epoch, Objective, Optimizer, OptimizerConfig, TrainSet};
use crate::rng;
use crate::select::{per_sample_losses, select_clean, SelectionConfig, SelectionResult};

const EVAL_CHUNK: usize = 1024;

/// When the clean subset is rebuilt during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CleansingMode {
    /// Before every fine-tuning epoch.
    Multiple,
    /// Once before the first fine-tuning epoch; reused afterwards.
    Once,
    /// Never; fine-tune on the full noisy set.
    None,
}

impl CleansingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CleansingMode::Multiple => "multiple",
            CleansingMode::Once => "once",
            CleansingMode::None => "none",
        }
    }
}

impl std::str::FromStr for CleansingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiple" => Ok(CleansingMode::Multiple),
            "once" => Ok(CleansingMode::Once),
            "none" => Ok(CleansingMode::None),
            other => Err(Error::config(format!("unknown cleansing mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnConfig {
    pub e_lp: usize,
    pub e_fft: usize,
    pub gce: GceConfig,
    pub cleansing: CleansingMode,
    pub lp_enabled: bool,
    /// Zero the head between probing and fine-tuning.
    pub reinit_head: bool,
    /// `tau`, class-fit threshold and EM controls. The seed is overridden
    /// per epoch from `seed`.
    pub selection: SelectionConfig,
    pub lp_optimizer: OptimizerConfig,
    pub fft_optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TurnConfig {
    fn default() -> Self {
        Self {
            e_lp: 20,
            e_fft: 4,
            gce: GceConfig::default(),
            cleansing: CleansingMode::Multiple,
            lp_enabled: true,
            reinit_head: false,
            selection: SelectionConfig::default(),
            lp_optimizer: OptimizerConfig::default_lp(),
            fft_optimizer: OptimizerConfig::default_fft(),
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TurnConfig {
    pub fn validate(&self) -> Result<()> {
        self.gce.validate()?;
        self.selection.validate()?;
        self.lp_optimizer.validate()?;
        self.fft_optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Settings for a single-loss baseline run.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub loss: LossKind,
    pub tuning: TuningMode,
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl BaselineConfig {
    /// 20 probing epochs with the probing optimizer, or 5 fine-tuning epochs
    /// with the fine-tuning optimizer.
    pub fn standard(loss: LossKind, tuning: TuningMode, seed: u64) -> Self {
        let (epochs, optimizer) = match tuning {
            TuningMode::Lp => (20, OptimizerConfig::default_lp()),
            TuningMode::Fft => (5, OptimizerConfig::default_fft()),
        };
        Self {
            loss,
            tuning,
            epochs,
            optimizer,
            batch_size: 128,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Lp,
    Fft,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Lp => "lp",
            Stage::Fft => "fft",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub stage: Stage,
    /// Epoch index within its stage, from 0.
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub val_acc: Option<f64>,
    /// Size of the training subset for this epoch.
    pub selected: usize,
    pub purity: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub records: Vec<EpochRecord>,
    pub best_acc: f64,
    pub last_acc: f64,
    pub config_echo: String,
    pub seed: u64,
    /// Step-2 selections keyed by fine-tuning epoch.
    pub selections: Vec<(usize, SelectionResult)>,
}

impl RunReport {
    fn new(records: Vec<EpochRecord>, initial_acc: f64, config_echo: String, seed: u64) -> Self {
        let best_acc = records.iter().map(|r| r.test_acc).fold(f64::NAN, f64::max);
        let last_acc = records.last().map_or(initial_acc, |r| r.test_acc);
        Self {
            best_acc: if best_acc.is_nan() { initial_acc } else { best_acc },
            last_acc,
            records,
            config_echo,
            seed,
            selections: Vec::new(),
        }
    }

    /// Purity of the last selection made, if any.
    pub fn final_purity(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.purity)
    }
}

/// Data the run is scored on after every epoch.
#[derive(Clone, Copy, Debug)]
pub struct EvalSets<'a> {
    pub test: &'a Dataset,
    pub valid: Option<&'a Dataset>,
}

/// Frozen-extractor outputs for every training row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCache {
    pub features: Array2<f64>,
}

impl FeatureCache {
    pub fn build(model: &Model, dataset: &Dataset) -> Result<Self> {
        Ok(Self {
            features: model.extractor.extract(dataset.inputs().view())?,
        })
    }
}

/// Argmax accuracy against the given labels; ties go to the lowest class.
pub fn evaluate(model: &Model, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let z = model.extractor.extract(dataset.inputs().view())?;
    evaluate_features(model, &z, dataset.given_labels())
}

fn evaluate_features(model: &Model, features: &Array2<f64>, labels: &[u32]) -> Result<f64> {
    let mut correct = 0usize;
    for (k, chunk) in features.axis_chunks_iter(Axis(0), EVAL_CHUNK).enumerate() {
        let logits = model.head.logits(chunk);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite logits during evaluation"));
        }
        correct += logits
            .rows()
            .into_iter()
            .enumerate()
            .filter(|(j, row)| argmax(row.as_slice().unwrap()) == labels[k * EVAL_CHUNK + j] as usize)
            .count();
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Scores the model on the evaluation sets. During probing the extractor is
/// frozen, so their features are computed once and reused.
struct Scorer<'a> {
    sets: EvalSets<'a>,
    frozen: Option<(Array2<f64>, Option<Array2<f64>>)>,
}

impl<'a> Scorer<'a> {
    fn new(sets: EvalSets<'a>) -> Self {
        Self { sets, frozen: None }
    }

    fn freeze(&mut self, model: &Model) -> Result<()> {
        let test = model.extractor.extract(self.sets.test.inputs().view())?;
        let valid = match self.sets.valid {
            Some(v) if !v.is_empty() => Some(model.extractor.extract(v.inputs().view())?),
            _ => None,
        };
        self.frozen = Some((test, valid));
        Ok(())
    }

    fn thaw(&mut self) {
        self.frozen = None;
    }

    fn score(&self, model: &Model) -> Result<(f64, Option<f64>)> {
        match &self.frozen {
            Some((test, valid)) => {
                let t = evaluate_features(model, test, self.sets.test.given_labels())?;
                let v = match (valid, self.sets.valid) {
                    (Some(z), Some(d)) => Some(evaluate_features(model, z, d.given_labels())?),
                    _ => None,
                };
                Ok((t, v))
            }
            None => {
                let t = evaluate(model, self.sets.test)?;
                let v = match self.sets.valid {
                    Some(d) if !d.is_empty() => Some(evaluate(model, d)?),
                    _ => None,
                };
                Ok((t, v))
            }
        }
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Trains only the head on cached features for `epochs` epochs.
fn probe(
    model: &mut Model,
    train: &Dataset,
    loss: LossKind,
    epochs: usize,
    optimizer: &OptimizerConfig,
    batch_size: usize,
    seed: u64,
    scorer: &mut Scorer<'_>,
) -> Result<(FeatureCache, Vec<EpochRecord>)> {
    let start = Instant::now();
    let cache = FeatureCache::build(model, train)?;
    scorer.freeze(model)?;
    let setup_ms = elapsed_ms(start);
    let mut opt = Optimizer::new(optimizer.clone())?;
    let mut objective = Objective::new(loss, train.len(), train.num_classes())?;
    let data = TrainSet::features(cache.features.view(), train.given_labels());
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        let stats = train_epoch(
            model,
            &data,
            &mut objective,
            &mut opt,
            batch_size,
            rng::derive_seed(seed, epoch as u64),
            TuningMode::Lp,
        )?;
        let (test_acc, val_acc) = scorer.score(model)?;
        records.push(EpochRecord {
            stage: Stage::Lp,
            epoch,
            train_loss: stats.mean_loss,
            test_acc,
            val_acc,
            selected: stats.samples,
            purity: None,
            wall_ms: elapsed_ms(start) + if epoch == 0 { setup_ms } else { 0.0 },
        });
    }
    scorer.thaw();
    Ok((cache, records))
}

/// Step 1: extracts features once, then trains the head under GCE for
/// `e_lp` epochs. The extractor is not modified.
pub fn run_lp(model: &mut Model, train: &Dataset, eval: EvalSets<'_>, config: &TurnConfig) -> Result<(FeatureCache, Vec<EpochRecord>)> {
    config.validate()?;
    let mut scorer = Scorer::new(eval);
    probe(
        model,
        train,
        LossKind::Gce(config.gce),
        config.e_lp,
        &config.lp_optimizer,
        config.batch_size,
        rng::derive_seed(config.seed, 0x4C50),
        &mut scorer,
    )
}

/// The full two-step run. Returns the report and the tuned model.
pub fn run_turn(model: &Model, train: &Dataset, eval: EvalSets<'_>, config: &TurnConfig) -> Result<(RunReport, Model)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut model = model.clone();
    let initial = evaluate(&model, eval.test)?;
    let mut records = Vec::new();
    if config.lp_enabled {
        let (_, lp_records) = run_lp(&mut model, train, eval, config)?;
        records.extend(lp_records);
    }
    if config.reinit_head {
        model.head.reset();
    }

    let scorer = Scorer::new(eval);
    let mut opt = Optimizer::new(config.fft_optimizer.clone())?;
    let mut objective = Objective::Ce;
    let all: Vec<usize> = (0..train.len()).collect();
    let mut current: Option<SelectionResult> = None;
    let mut selections = Vec::new();
    for epoch in 0..config.e_fft {
        let start = Instant::now();
        let reselect = match config.cleansing {
            CleansingMode::Multiple => true,
            CleansingMode::Once => epoch == 0,
            CleansingMode::None => false,
        };
        if reselect {
            let losses = per_sample_losses(&model, train)?;
            let selection = SelectionConfig {
                seed: rng::derive_seed(config.seed, 0x5E1 + epoch as u64),
                ..config.selection.clone()
            };
            let result = select_clean(
                &losses,
                train.given_labels(),
                train.num_classes(),
                train.true_labels(),
                &selection,
            )?;
            log::info!(
                "epoch {epoch}: selected {} rows ({} per class), purity {:?}",
                result.indices.len(),
                result.quota,
                result.purity
            );
            selections.push((epoch, result.clone()));
            current = Some(result);
        }
        let (rows, purity) = match &current {
            Some(sel) => (sel.indices.as_slice(), sel.purity),
            None => (all.as_slice(), None),
        };
        let data = TrainSet::raw(train.inputs().view(), train.given_labels()).with_indices(rows);
        let stats = train_epoch(
            &mut model,
            &data,
            &mut objective,
            &mut opt,
            config.batch_size,
            rng::derive_seed(config.seed, 0xFF7 + epoch as u64),
            TuningMode::Fft,
        )?;
        let (test_acc, val_acc) = scorer.score(&model)?;
        records.push(EpochRecord {
            stage: Stage::Fft,
            epoch,
            train_loss: stats.mean_loss,
            test_acc,
            val_acc,
            selected: stats.samples,
            purity,
            wall_ms: elapsed_ms(start),
        });
    }
    let echo = format!("{config:?}");
    let mut report = RunReport::new(records, initial, echo, config.seed);
    report.selections = selections;
    Ok((report, model))
}

/// Trains with one loss throughout, either probing or fully fine-tuning.
pub fn run_baseline(model: &Model, train: &Dataset, eval: EvalSets<'_>, config: &BaselineConfig) -> Result<(RunReport, Model)> {
    config.optimizer.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let mut model = model.clone();
    let initial = evaluate(&model, eval.test)?;
    let mut scorer = Scorer::new(eval);
    let records = match config.tuning {
        TuningMode::Lp => {
            probe(
                &mut model,
                train,
                config.loss,
                config.epochs,
                &config.optimizer,
                config.batch_size,
                config.seed,
                &mut scorer,
            )?
            .1
        }
        TuningMode::Fft => {
            let mut opt = Optimizer::new(config.optimizer.clone())?;
            let mut objective = Objective::new(config.loss, train.len(), train.num_classes())?;
            let data = TrainSet::raw(train.inputs().view(), train.given_labels());
            let mut records = Vec::with_capacity(config.epochs);
            for epoch in 0..config.epochs {
                let start = Instant::now();
                let stats = train_epoch(
                    &mut model,
                    &data,
                    &mut objective,
                    &mut opt,
                    config.batch_size,
                    rng::derive_seed(config.seed, epoch as u64),
                    TuningMode::Fft,
                )?;
                let (test_acc, val_acc) = scorer.score(&model)?;
                records.push(EpochRecord {
                    stage: Stage::Fft,
                    epoch,
                    train_loss: stats.mean_loss,
                    test_acc,
                    val_acc,
                    selected: stats.samples,
                    purity: None,
                    wall_ms: elapsed_ms(start),
                });
            }
            records
        }
    };
    let echo = format!("{config:?}");
    Ok((RunReport::new(records, initial, echo, config.seed), model))
}

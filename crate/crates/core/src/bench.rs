//! Ready-made benchmark setup: synthetic splits, a pretrained extractor and
//! the optimizer settings the comparisons are run with.

use crate::dataset::{generate_synthetic, SyntheticSpec, SyntheticSplits};
use crate::error::Result;
use crate::losses::LossKind;
use crate::model::{init_model, pretrain_extractor, ExtractorMode, Model, ModelDims, PretrainConfig, TuningMode};
use crate::optim::{AdamWConfig, OptimizerConfig, SgdConfig};
use crate::pipeline::{BaselineConfig, TurnConfig};

/// Class-mean spread of the reference benchmark. At 3.0 the clusters sit
/// roughly 34 noise standard deviations apart and every method scores 100%.
pub const S1_SEPARATION: f64 = 0.6;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub data: SyntheticSpec,
    pub hidden: usize,
    pub feature: usize,
    pub pretrain: PretrainConfig,
    pub lp_optimizer: OptimizerConfig,
    pub fft_optimizer: OptimizerConfig,
}

impl BenchmarkSpec {
    /// The 20-class, 64-dimensional reference setup.
    pub fn s1(seed: u64) -> Self {
        Self {
            data: SyntheticSpec {
                num_classes: 20,
                input_dim: 64,
                per_class_train: 500,
                per_class_test: 100,
                per_class_pretrain: 500,
                separation: S1_SEPARATION,
                seed,
            },
            hidden: 128,
            feature: 32,
            pretrain: PretrainConfig {
                epochs: 10,
                optimizer: OptimizerConfig::default_lp(),
                batch_size: 128,
                seed,
            },
            lp_optimizer: OptimizerConfig::Sgd(SgdConfig {
                lr: 3e-3,
                momentum: 0.9,
                weight_decay: 0.0,
            }),
            fft_optimizer: OptimizerConfig::AdamW(AdamWConfig::with_lr(2e-3)),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input: self.data.input_dim,
            hidden: self.hidden,
            feature: self.feature,
            classes: self.data.num_classes,
        }
    }

    /// Default two-step settings with this benchmark's optimizers.
    pub fn turn_config(&self, seed: u64) -> TurnConfig {
        TurnConfig {
            lp_optimizer: self.lp_optimizer.clone(),
            fft_optimizer: self.fft_optimizer.clone(),
            seed,
            ..TurnConfig::default()
        }
    }

    /// Standard baseline settings with this benchmark's optimizers.
    pub fn baseline_config(&self, loss: LossKind, tuning: TuningMode, seed: u64) -> BaselineConfig {
        let mut cfg = BaselineConfig::standard(loss, tuning, seed);
        cfg.optimizer = match tuning {
            TuningMode::Lp => self.lp_optimizer.clone(),
            TuningMode::Fft => self.fft_optimizer.clone(),
        };
        cfg
    }
}

pub struct Benchmark {
    pub splits: SyntheticSplits,
    /// Pretrained extractor with a zero head.
    pub model: Model,
}

pub fn prepare(spec: &BenchmarkSpec) -> Result<Benchmark> {
    let splits = generate_synthetic(&spec.data)?;
    let fresh = init_model(spec.dims(), ExtractorMode::Mlp, true, spec.data.seed)?;
    let extractor = pretrain_extractor(&fresh.extractor, &splits.pretrain, spec.data.num_classes, &spec.pretrain)?;
    let model = Model::new(extractor, fresh.head)?;
    Ok(Benchmark { splits, model })
}

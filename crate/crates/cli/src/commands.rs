//! The `gen`, `run` and `report` subcommands.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rayon::prelude::*;
use turnlnl::dataset::{generate_synthetic, read_dataset, split, write_dataset, DataKind, Dataset, SplitSpec, SyntheticSpec};
use turnlnl::model::{
    init_model, pretrain_extractor, save_checkpoint, ExtractorMode, Model, ModelDims, PretrainConfig, TuningMode,
};
use turnlnl::noise::{NoiseKind, NoiseSpec, NoisyDataset};
use turnlnl::optim::{OptimizerConfig, SgdConfig};
use turnlnl::pipeline::{run_baseline, run_turn, BaselineConfig, EvalSets, RunReport, TurnConfig};
use turnlnl::select::{selection_dump_lines, SelectionConfig};
use turnlnl::Error;

use crate::config::{DataSource, ExperimentConfig, MethodName, RunPoint};
use crate::output::{self, io_err, SummaryRow, SummaryWriter};

pub const CHECKPOINT_FILE: &str = "model.tmd";
pub const NOISE_REPORT_FILE: &str = "noise_report.txt";

/// Settings that come from the command line or the environment rather than
/// the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub deterministic: bool,
    /// Worker cap; `None` or `Some(0)` lets the pool decide.
    pub threads: Option<usize>,
}

impl Overrides {
    /// Replaces the configured seed list when a seed override is present.
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.run.seeds = vec![seed];
        }
        if self.deterministic {
            cfg.run.deterministic = true;
        }
    }
}

/// Clean splits plus the starting model for one seed.
struct Prepared {
    train: Dataset,
    test: Dataset,
    model: Model,
}

fn synthetic_spec(cfg: &ExperimentConfig, seed: u64) -> SyntheticSpec {
    let d = &cfg.data;
    SyntheticSpec {
        num_classes: d.classes,
        input_dim: d.dim,
        per_class_train: d.train_per_class,
        per_class_test: d.test_per_class,
        per_class_pretrain: d.pretrain_per_class,
        separation: d.separation,
        seed,
    }
}

fn pretrain_config(cfg: &ExperimentConfig, seed: u64) -> PretrainConfig {
    PretrainConfig {
        epochs: cfg.model.pretrain_epochs,
        optimizer: OptimizerConfig::Sgd(SgdConfig {
            lr: cfg.model.pretrain_lr,
            momentum: 0.9,
            weight_decay: 0.0,
        }),
        batch_size: cfg.optim.batch,
        seed,
    }
}

fn pretrained_model(cfg: &ExperimentConfig, input: usize, classes: usize, pretrain: &Dataset, seed: u64) -> Result<Model, Error> {
    let mode = if cfg.model.adapter {
        ExtractorMode::ResidualAdapter
    } else {
        ExtractorMode::Mlp
    };
    let feature = if cfg.model.adapter { input } else { cfg.data.feature_dim };
    let dims = ModelDims {
        input,
        hidden: cfg.model.hidden,
        feature,
        classes,
    };
    let fresh = init_model(dims, mode, true, seed)?;
    let extractor = pretrain_extractor(&fresh.extractor, pretrain, classes, &pretrain_config(cfg, seed))?;
    Model::new(extractor, fresh.head)
}

fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared, Error> {
    if cfg.model.adapter && cfg.data.feature_dim != cfg.data.dim && cfg.data.source == DataSource::Synthetic {
        return Err(Error::Config(format!(
            "[model] adapter: the residual adapter keeps width, so [data] feature_dim ({}) must equal dim ({})",
            cfg.data.feature_dim, cfg.data.dim
        )));
    }
    match &cfg.data.source {
        DataSource::Synthetic => {
            let splits = generate_synthetic(&synthetic_spec(cfg, seed))?;
            let model = pretrained_model(cfg, cfg.data.dim, cfg.data.classes, &splits.pretrain, seed)?;
            Ok(Prepared {
                train: splits.train,
                test: splits.test,
                model,
            })
        }
        DataSource::Bundle(dir) => {
            let train = read_dataset(&dir.join("train"))?;
            let test = read_dataset(&dir.join("test"))?;
            if train.num_classes() != test.num_classes() || train.dim() != test.dim() {
                return Err(Error::DataAt {
                    path: dir.clone(),
                    msg: "train and test bundles disagree on classes or width".into(),
                });
            }
            let classes = train.num_classes();
            let model = match train.kind() {
                DataKind::Raw => {
                    let pretrain = read_dataset(&dir.join("pretrain"))?;
                    pretrained_model(cfg, train.dim(), classes, &pretrain, seed)?
                }
                DataKind::Feature if cfg.model.adapter => {
                    let dims = ModelDims {
                        input: train.dim(),
                        hidden: cfg.model.hidden,
                        feature: train.dim(),
                        classes,
                    };
                    init_model(dims, ExtractorMode::ResidualAdapter, true, seed)?
                }
                DataKind::Feature => {
                    let dims = ModelDims {
                        input: train.dim(),
                        hidden: 0,
                        feature: train.dim(),
                        classes,
                    };
                    init_model(dims, ExtractorMode::Identity, true, seed)?
                }
            };
            Ok(Prepared { train, test, model })
        }
    }
}

fn noise_spec(cfg: &ExperimentConfig, ratio: f64, seed: u64) -> NoiseSpec {
    match &cfg.noise {
        None => NoiseSpec {
            kind: NoiseKind::None,
            seed,
            ..NoiseSpec::default()
        },
        Some(n) => NoiseSpec {
            kind: n.kind,
            ratio,
            groups: n.groups.clone(),
            std: n.std,
            allow_identity_flip: n.allow_identity_flip,
            seed,
        },
    }
}

fn noise_name(cfg: &ExperimentConfig) -> &'static str {
    cfg.noise.as_ref().map_or(NoiseKind::None, |n| n.kind).as_str()
}

fn single<T: Copy>(values: &[T], section: &str, key: &str) -> Result<T, Error> {
    match values {
        [v] => Ok(*v),
        _ => Err(Error::Config(format!(
            "[{section}] {key}: `gen` writes one bundle set and needs a single value, got {}",
            values.len()
        ))),
    }
}

fn noise_report(cfg: &ExperimentConfig, ratio: f64, seed: u64, noisy: &NoisyDataset) -> String {
    let ds = &noisy.dataset;
    let mut s = String::new();
    let _ = writeln!(s, "kind = {}", noise_name(cfg));
    let _ = writeln!(s, "ratio = {ratio}");
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "rows = {}", ds.len());
    let _ = writeln!(s, "flips = {}", noisy.flip_count());
    let _ = writeln!(s, "flip_fraction = {:.6}", noisy.flip_fraction());
    let truth = ds.true_labels().unwrap_or(ds.given_labels());
    let mut rows = vec![0usize; ds.num_classes()];
    let mut flips = vec![0usize; ds.num_classes()];
    for (i, &t) in truth.iter().enumerate() {
        if let Some(r) = rows.get_mut(t as usize) {
            *r += 1;
            flips[t as usize] += noisy.flip_mask[i] as usize;
        }
    }
    for c in 0..ds.num_classes() {
        let _ = writeln!(s, "class {c}: rows = {}, flips = {}", rows[c], flips[c]);
    }
    s
}

/// Writes `train/`, `test/` and (for raw data) `pretrain/` bundles, plus
/// `train_noisy/` and `noise_report.txt` when the config has a `[noise]`
/// section.
pub fn cmd_gen(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let seed = single(&cfg.run.seeds, "run", "seed")?;
    let train = match &cfg.data.source {
        DataSource::Synthetic => {
            let splits = generate_synthetic(&synthetic_spec(cfg, seed))?;
            write_dataset(&splits.train, &out.join("train"))?;
            write_dataset(&splits.test, &out.join("test"))?;
            write_dataset(&splits.pretrain, &out.join("pretrain"))?;
            splits.train
        }
        DataSource::Bundle(dir) => read_dataset(&dir.join("train"))?,
    };
    if let Some(n) = &cfg.noise {
        let ratio = single(&n.ratios, "noise", "ratio")?;
        let (noisy, _) = noise_spec(cfg, ratio, seed).apply(&train)?;
        write_dataset(&noisy.dataset, &out.join("train_noisy"))?;
        let path = out.join(NOISE_REPORT_FILE);
        fs::write(&path, noise_report(cfg, ratio, seed, &noisy)).map_err(|e| io_err(&path, e))?;
        log::info!("{} of {} labels flipped", noisy.flip_count(), noisy.dataset.len());
    }
    Ok(())
}

fn turn_config(cfg: &ExperimentConfig, p: &RunPoint) -> TurnConfig {
    TurnConfig {
        e_lp: p.e_lp,
        e_fft: p.e_fft,
        gce: cfg.method.gce,
        cleansing: cfg.turn.cleansing,
        lp_enabled: cfg.turn.lp_enabled,
        reinit_head: cfg.model.reinit_head,
        selection: SelectionConfig {
            tau: p.tau,
            min_class_fit: cfg.turn.min_class_fit,
            per_class: cfg.turn.per_class,
            seed: p.seed,
            ..SelectionConfig::default()
        },
        lp_optimizer: cfg.optim.build(cfg.optim.lp_kind, p.lp_lr),
        fft_optimizer: cfg.optim.build(cfg.optim.fft_kind, p.fft_lr),
        batch_size: cfg.optim.batch,
        seed: p.seed,
    }
}

fn baseline_config(cfg: &ExperimentConfig, p: &RunPoint) -> BaselineConfig {
    let tuning = cfg.method.tuning;
    let mut b = BaselineConfig::standard(cfg.method.loss(), tuning, p.seed);
    if let Some(e) = cfg.run.epochs {
        b.epochs = e;
    }
    b.optimizer = match tuning {
        TuningMode::Lp => cfg.optim.build(cfg.optim.lp_kind, p.lp_lr),
        TuningMode::Fft => cfg.optim.build(cfg.optim.fft_kind, p.fft_lr),
    };
    b.batch_size = cfg.optim.batch;
    b
}

fn summary_row(cfg: &ExperimentConfig, p: &RunPoint, report: &RunReport) -> SummaryRow {
    let turn = cfg.method.name == MethodName::Turn;
    let lp = cfg.method.tuning == TuningMode::Lp;
    let epochs = cfg.run.epochs;
    let baseline_epochs = |tuning_lp: bool, default: usize| (lp == tuning_lp).then(|| epochs.unwrap_or(default));
    SummaryRow {
        run_id: p.run_id(),
        method: cfg.method.name.as_str().to_string(),
        tuning: if turn { "lp+fft".into() } else { cfg.method.tuning.as_str().into() },
        noise: noise_name(cfg).into(),
        ratio: p.ratio,
        tau: turn.then_some(p.tau),
        e_lp: if turn { Some(p.e_lp) } else { baseline_epochs(true, 20) },
        e_fft: if turn { Some(p.e_fft) } else { baseline_epochs(false, 5) },
        lp_lr: (turn || lp).then_some(p.lp_lr),
        fft_lr: (turn || !lp).then_some(p.fft_lr),
        seed: p.seed,
        best: report.best_acc,
        last: report.last_acc,
        purity: report.final_purity(),
        wall_ms: report.records.iter().map(|r| r.wall_ms).sum(),
    }
}

fn execute(cfg: &ExperimentConfig, prepared: &Prepared, p: &RunPoint, dir: &Path) -> Result<RunReport, Error> {
    // Without a [noise] section the labels are used as given, which also
    // covers bundles whose true labels are unknown.
    let noisy = match cfg.noise {
        Some(_) => noise_spec(cfg, p.ratio, p.seed).apply(&prepared.train)?.0.dataset,
        None => prepared.train.clone(),
    };
    let (train, valid) = if cfg.data.valid_fraction > 0.0 {
        let (t, v) = split(
            &noisy,
            &SplitSpec {
                valid_fraction: cfg.data.valid_fraction,
                seed: p.seed,
            },
        )?;
        (t, Some(v))
    } else {
        (noisy, None)
    };
    let eval = EvalSets {
        test: &prepared.test,
        valid: valid.as_ref(),
    };
    let (report, model) = if cfg.method.name == MethodName::Turn {
        run_turn(&prepared.model, &train, eval, &turn_config(cfg, p))?
    } else {
        run_baseline(&prepared.model, &train, eval, &baseline_config(cfg, p))?
    };

    let run_id = p.run_id();
    output::write_metrics(&dir.join(output::METRICS_FILE), &run_id, &report)?;
    if !report.selections.is_empty() {
        let mut text = String::new();
        for (epoch, sel) in &report.selections {
            for line in selection_dump_lines(*epoch, sel, train.given_labels(), train.true_labels()) {
                text.push_str(&line);
                text.push('\n');
            }
        }
        let path = dir.join(output::SELECTION_FILE);
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    }
    save_checkpoint(&model, &dir.join(CHECKPOINT_FILE))?;
    Ok(report)
}

/// Runs every point of the sweep. Each run writes its own directory under
/// `out/runs/`; finished runs append one row to `out/summary.csv`. A failed
/// run does not stop the others; the first failure (in sweep order) is
/// returned.
pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<(), Error> {
    let points = cfg.expand();
    fs::create_dir_all(out.join("runs")).map_err(|e| io_err(out, e))?;
    let writer = Mutex::new(SummaryWriter::open(out)?);

    let mut seeds: Vec<u64> = points.iter().map(|p| p.seed).collect();
    seeds.dedup();
    let deterministic = cfg.run.deterministic;
    let workers = if deterministic { 1 } else { threads.unwrap_or(0) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let prep_one = |seed: u64| (seed, prepare(cfg, seed));
    let prepared: BTreeMap<u64, Result<Prepared, Error>> = if deterministic {
        seeds.iter().map(|&s| prep_one(s)).collect()
    } else {
        pool.install(|| seeds.par_iter().map(|&s| prep_one(s)).collect())
    };

    let run_one = |p: &RunPoint| -> Result<(), Error> {
        let start = Instant::now();
        let run_id = p.run_id();
        let outcome = prepared[&p.seed].as_ref().map_err(Error::clone).and_then(|prep| {
            let dir = out.join("runs").join(&run_id);
            fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
            execute(cfg, prep, p, &dir)
        });
        match outcome {
            Ok(report) => {
                log::info!(
                    "{run_id}: best {:.4} last {:.4} ({:.1}s)",
                    report.best_acc,
                    report.last_acc,
                    start.elapsed().as_secs_f64()
                );
                let row = summary_row(cfg, p, &report);
                writer.lock().unwrap_or_else(|e| e.into_inner()).append(&row)
            }
            Err(e) => {
                log::error!("{run_id} failed: {e}");
                Err(with_run_id(e, &run_id))
            }
        }
    };

    let results: Vec<Result<(), Error>> = if deterministic {
        points.iter().map(run_one).collect()
    } else {
        pool.install(|| points.par_iter().map(run_one).collect())
    };
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed > 0 {
        log::error!("{failed} of {} runs failed", points.len());
    }
    results.into_iter().find(|r| r.is_err()).unwrap_or(Ok(()))
}

fn with_run_id(e: Error, run_id: &str) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{run_id}: {m}")),
        Error::Data(m) => Error::Data(format!("{run_id}: {m}")),
        Error::DataAt { path, msg } => Error::DataAt {
            path,
            msg: format!("{run_id}: {msg}"),
        },
        Error::Numeric(m) => Error::Numeric(format!("{run_id}: {m}")),
        Error::Contract(m) => Error::Contract(format!("{run_id}: {m}")),
    }
}

/// Accepts either a directory holding `summary.csv` or the file itself.
fn summary_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(output::SUMMARY_FILE)
    } else {
        input.to_path_buf()
    }
}

/// Merges the summaries of `inputs` and renders the pivot table.
pub fn cmd_report(inputs: &[PathBuf]) -> Result<String, Error> {
    if inputs.is_empty() {
        return Err(Error::Config("report needs at least one input directory".into()));
    }
    let mut rows = Vec::new();
    for input in inputs {
        rows.extend(output::read_summary(&summary_path(input))?);
    }
    Ok(output::pivot(&output::dedup(rows)))
}

//! Experiment configuration: an INI-like `[section]` / `key = value` file.
//!
//! Comma-separated values are sweep axes and are only accepted on `tau`,
//! `e_lp`, `e_fft`, `ratio`, `lp_lr`, `fft_lr` and `seed`. Unknown sections
//! and keys are rejected. Lines starting with `#` or `;` are comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use turnlnl::losses::{ElrConfig, GceConfig, LossKind};
use turnlnl::model::TuningMode;
use turnlnl::noise::{cifar100_superclass_groups, NoiseKind};
use turnlnl::optim::{AdamWConfig, OptimizerConfig, SgdConfig};
use turnlnl::pipeline::CleansingMode;
use turnlnl::select::SelectionConfig;
use turnlnl::Error;

const SCHEMA: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "source",
            "path",
            "classes",
            "dim",
            "feature_dim",
            "train_per_class",
            "test_per_class",
            "pretrain_per_class",
            "separation",
            "valid_fraction",
        ],
    ),
    ("noise", &["kind", "ratio", "std", "groups", "allow_identity_flip"]),
    ("model", &["hidden", "adapter", "reinit_head", "pretrain_epochs", "pretrain_lr"]),
    ("method", &["name", "tuning", "q", "elr_beta", "elr_lambda"]),
    ("turn", &["e_lp", "e_fft", "tau", "cleansing", "lp_enabled", "min_class_fit", "per_class"]),
    (
        "optim",
        &["lp_kind", "lp_lr", "fft_kind", "fft_lr", "momentum", "weight_decay", "batch"],
    ),
    ("run", &["seed", "epochs", "deterministic"]),
];

const SWEEPABLE: &[&str] = &["tau", "e_lp", "e_fft", "ratio", "lp_lr", "fft_lr", "seed"];

#[derive(Clone, Debug)]
struct Entry {
    raw: String,
    line: usize,
}

/// Parsed but untyped configuration.
#[derive(Clone, Debug, Default)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, Entry>>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let mut out = RawConfig::default();
        let mut current: Option<String> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(config_err(format!("line {lineno}: unknown section [{name}]")));
                }
                out.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(format!("line {lineno}: expected `key = value`")));
            };
            let Some(section) = &current else {
                return Err(config_err(format!("line {lineno}: key outside of any section")));
            };
            let key = key.trim();
            let keys = SCHEMA.iter().find(|(s, _)| s == section).unwrap().1;
            if !keys.contains(&key) {
                return Err(config_err(format!("line {lineno}: unknown key `{key}` in [{section}]")));
            }
            let value = match value.find(" #") {
                Some(pos) => &value[..pos],
                None => value,
            };
            let entry = Entry {
                raw: value.trim().to_string(),
                line: lineno,
            };
            let map = out.sections.get_mut(section).unwrap();
            if map.insert(key.to_string(), entry).is_some() {
                return Err(config_err(format!("line {lineno}: duplicate key `{key}` in [{section}]")));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    fn entry(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|m| m.get(key))
    }

    fn bad(section: &str, key: &str, e: &Entry, why: impl std::fmt::Display) -> Error {
        config_err(format!("[{section}] {key} (line {}): {why}", e.line))
    }

    fn scalar<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T, Error>
    where
        T::Err: std::fmt::Display,
    {
        let Some(e) = self.entry(section, key) else {
            return Ok(default);
        };
        if e.raw.contains(',') {
            return Err(Self::bad(section, key, e, "lists are not allowed on this key"));
        }
        e.raw
            .parse()
            .map_err(|err| Self::bad(section, key, e, format!("cannot parse `{}`: {err}", e.raw)))
    }

    fn list<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<Vec<T>, Error>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(SWEEPABLE.contains(&key));
        let Some(e) = self.entry(section, key) else {
            return Ok(vec![default]);
        };
        e.raw
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|err| Self::bad(section, key, e, format!("cannot parse `{}`: {err}", v.trim())))
            })
            .collect()
    }

    fn check(&self, section: &str, key: &str, ok: bool, why: &str) -> Result<(), Error> {
        if ok {
            return Ok(());
        }
        let e = self.entry(section, key).cloned().unwrap_or(Entry {
            raw: String::new(),
            line: 0,
        });
        Err(Self::bad(section, key, &e, why))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    /// Directory holding `train/` and `test/` bundles, plus `pretrain/` for
    /// raw data.
    Bundle(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub source: DataSource,
    pub classes: usize,
    pub dim: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub pretrain_per_class: usize,
    pub separation: f64,
    pub valid_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSection {
    pub kind: NoiseKind,
    pub ratios: Vec<f64>,
    pub std: f64,
    pub groups: Option<Vec<Vec<u32>>>,
    pub allow_identity_flip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub hidden: usize,
    pub adapter: bool,
    pub reinit_head: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodName {
    Turn,
    Ce,
    Gce,
    Elr,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Turn => "turn",
            MethodName::Ce => "ce",
            MethodName::Gce => "gce",
            MethodName::Elr => "elr",
        }
    }
}

impl FromStr for MethodName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "turn" => Ok(MethodName::Turn),
            "ce" => Ok(MethodName::Ce),
            "gce" => Ok(MethodName::Gce),
            "elr" => Ok(MethodName::Elr),
            other => Err(format!("unknown method `{other}` (turn, ce, gce, elr)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSection {
    pub name: MethodName,
    pub tuning: TuningMode,
    pub gce: GceConfig,
    pub elr: ElrConfig,
}

impl MethodSection {
    pub fn loss(&self) -> LossKind {
        match self.name {
            MethodName::Ce | MethodName::Turn => LossKind::Ce,
            MethodName::Gce => LossKind::Gce(self.gce),
            MethodName::Elr => LossKind::Elr(self.elr),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TurnSection {
    pub e_lp: Vec<usize>,
    pub e_fft: Vec<usize>,
    pub tau: Vec<f64>,
    pub cleansing: CleansingMode,
    pub lp_enabled: bool,
    pub min_class_fit: usize,
    pub per_class: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    AdamW,
}

impl FromStr for OptimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(OptimKind::Sgd),
            "adamw" => Ok(OptimKind::AdamW),
            other => Err(format!("unknown optimizer `{other}` (sgd, adamw)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimSection {
    pub lp_kind: OptimKind,
    pub lp_lr: Vec<f64>,
    pub fft_kind: OptimKind,
    pub fft_lr: Vec<f64>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch: usize,
}

impl OptimSection {
    pub fn build(&self, kind: OptimKind, lr: f64) -> OptimizerConfig {
        match kind {
            OptimKind::Sgd => OptimizerConfig::Sgd(SgdConfig {
                lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            }),
            OptimKind::AdamW => OptimizerConfig::AdamW(AdamWConfig {
                weight_decay: self.weight_decay,
                ..AdamWConfig::with_lr(lr)
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    /// Baseline epochs; `None` means 20 for probing and 5 for fine-tuning.
    pub epochs: Option<usize>,
    pub deterministic: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSection,
    /// `None` when the file has no `[noise]` section.
    pub noise: Option<NoiseSection>,
    pub model: ModelSection,
    pub method: MethodSection,
    pub turn: TurnSection,
    pub optim: OptimSection,
    pub run: RunSection,
}

fn parse_groups(raw: &str) -> Result<Vec<Vec<u32>>, String> {
    if raw == "cifar100-super" {
        return Ok(cifar100_superclass_groups());
    }
    let inner = raw
        .trim()
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or("expected `cifar100-super` or `[[a,b],[c,d],...]`")?;
    let mut groups = Vec::new();
    let mut rest = inner.trim();
    while !rest.is_empty() {
        let open = rest.strip_prefix('[').ok_or("expected `[` opening a group")?;
        let close = open.find(']').ok_or("unterminated group")?;
        let group = open[..close]
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse::<u32>().map_err(|e| format!("bad class id `{}`: {e}", t.trim())))
            .collect::<Result<Vec<_>, _>>()?;
        groups.push(group);
        rest = open[close + 1..].trim_start();
        rest = rest.strip_prefix(',').unwrap_or(rest).trim_start();
    }
    Ok(groups)
}

impl ExperimentConfig {
    pub fn from_raw(raw: &RawConfig) -> Result<Self, Error> {
        let source = match raw.scalar("data", "source", "synthetic".to_string())?.as_str() {
            "synthetic" => DataSource::Synthetic,
            "bundle" => {
                let path: String = raw.scalar("data", "path", String::new())?;
                raw.check("data", "path", !path.is_empty(), "required when source = bundle")?;
                DataSource::Bundle(PathBuf::from(path))
            }
            other => {
                raw.check("data", "source", false, &format!("unknown source `{other}` (synthetic, bundle)"))?;
                unreachable!()
            }
        };
        let data = DataSection {
            source,
            classes: raw.scalar("data", "classes", 20)?,
            dim: raw.scalar("data", "dim", 64)?,
            feature_dim: raw.scalar("data", "feature_dim", 32)?,
            train_per_class: raw.scalar("data", "train_per_class", 500)?,
            test_per_class: raw.scalar("data", "test_per_class", 100)?,
            pretrain_per_class: raw.scalar("data", "pretrain_per_class", 500)?,
            separation: raw.scalar("data", "separation", turnlnl::bench::S1_SEPARATION)?,
            valid_fraction: raw.scalar("data", "valid_fraction", 0.0)?,
        };
        raw.check("data", "classes", data.classes >= 1, "must be at least 1")?;
        raw.check("data", "dim", data.dim >= 1, "must be at least 1")?;
        raw.check("data", "feature_dim", data.feature_dim >= 1, "must be at least 1")?;
        for key in ["train_per_class", "test_per_class", "pretrain_per_class"] {
            let v = match key {
                "train_per_class" => data.train_per_class,
                "test_per_class" => data.test_per_class,
                _ => data.pretrain_per_class,
            };
            raw.check("data", key, v >= 1, "must be at least 1")?;
        }
        raw.check(
            "data",
            "separation",
            data.separation.is_finite() && data.separation >= 0.0,
            "must be finite and >= 0",
        )?;
        raw.check(
            "data",
            "valid_fraction",
            (0.0..1.0).contains(&data.valid_fraction),
            "must lie in [0, 1)",
        )?;

        let noise = if raw.has_section("noise") {
            let kind = raw.scalar("noise", "kind", NoiseKind::Symmetric)?;
            let ratios: Vec<f64> = raw.list("noise", "ratio", 0.0)?;
            for r in &ratios {
                raw.check("noise", "ratio", (0.0..=1.0).contains(r), &format!("must lie in [0, 1], got {r}"))?;
            }
            let std: f64 = raw.scalar("noise", "std", 0.1)?;
            raw.check("noise", "std", std.is_finite() && std > 0.0, "must be positive")?;
            let groups = match raw.entry("noise", "groups") {
                Some(e) => Some(parse_groups(&e.raw).map_err(|why| RawConfig::bad("noise", "groups", e, why))?),
                None => None,
            };
            raw.check(
                "noise",
                "groups",
                kind != NoiseKind::Asymmetric || groups.is_some(),
                "required for asymmetric noise",
            )?;
            Some(NoiseSection {
                kind,
                ratios,
                std,
                groups,
                allow_identity_flip: raw.scalar("noise", "allow_identity_flip", false)?,
            })
        } else {
            None
        };

        let model = ModelSection {
            hidden: raw.scalar("model", "hidden", 128)?,
            adapter: raw.scalar("model", "adapter", false)?,
            reinit_head: raw.scalar("model", "reinit_head", false)?,
            pretrain_epochs: raw.scalar("model", "pretrain_epochs", 10)?,
            pretrain_lr: raw.scalar("model", "pretrain_lr", 1e-2)?,
        };
        raw.check("model", "hidden", model.hidden >= 1, "must be at least 1")?;
        raw.check("model", "pretrain_lr", model.pretrain_lr > 0.0, "must be positive")?;

        let name: MethodName = raw.scalar("method", "name", MethodName::Turn)?;
        let default_tuning = if name == MethodName::Turn { TuningMode::Fft } else { TuningMode::Lp };
        let method = MethodSection {
            name,
            tuning: raw.scalar("method", "tuning", default_tuning)?,
            gce: GceConfig {
                q: raw.scalar("method", "q", GceConfig::default().q)?,
            },
            elr: ElrConfig {
                beta: raw.scalar("method", "elr_beta", ElrConfig::default().beta)?,
                lambda: raw.scalar("method", "elr_lambda", ElrConfig::default().lambda)?,
            },
        };
        method
            .gce
            .validate()
            .map_err(|e| config_err(format!("[method] q: {e}")))?;
        method
            .elr
            .validate()
            .map_err(|e| config_err(format!("[method] elr_beta/elr_lambda: {e}")))?;

        let defaults = SelectionConfig::default();
        let turn = TurnSection {
            e_lp: raw.list("turn", "e_lp", 20)?,
            e_fft: raw.list("turn", "e_fft", 4)?,
            tau: raw.list("turn", "tau", defaults.tau)?,
            cleansing: raw.scalar("turn", "cleansing", CleansingMode::Multiple)?,
            lp_enabled: raw.scalar("turn", "lp_enabled", true)?,
            min_class_fit: raw.scalar("turn", "min_class_fit", defaults.min_class_fit)?,
            per_class: raw.scalar("turn", "per_class", defaults.per_class)?,
        };
        for t in &turn.tau {
            raw.check("turn", "tau", (0.0..1.0).contains(t), &format!("must lie in [0, 1), got {t}"))?;
        }

        let optim = OptimSection {
            lp_kind: raw.scalar("optim", "lp_kind", OptimKind::Sgd)?,
            lp_lr: raw.list("optim", "lp_lr", 1e-2)?,
            fft_kind: raw.scalar("optim", "fft_kind", OptimKind::AdamW)?,
            fft_lr: raw.list("optim", "fft_lr", 1e-3)?,
            momentum: raw.scalar("optim", "momentum", 0.9)?,
            weight_decay: raw.scalar("optim", "weight_decay", 0.0)?,
            batch: raw.scalar("optim", "batch", 128)?,
        };
        for lr in optim.lp_lr.iter() {
            raw.check("optim", "lp_lr", lr.is_finite() && *lr >= 0.0, "must be finite and >= 0")?;
        }
        for lr in optim.fft_lr.iter() {
            raw.check("optim", "fft_lr", lr.is_finite() && *lr >= 0.0, "must be finite and >= 0")?;
        }
        raw.check("optim", "momentum", (0.0..1.0).contains(&optim.momentum), "must lie in [0, 1)")?;
        raw.check("optim", "weight_decay", optim.weight_decay >= 0.0, "must be >= 0")?;
        raw.check("optim", "batch", optim.batch >= 1, "must be at least 1")?;

        let run = RunSection {
            seeds: raw.list("run", "seed", 0)?,
            epochs: match raw.entry("run", "epochs") {
                Some(_) => Some(raw.scalar("run", "epochs", 0)?),
                None => None,
            },
            deterministic: raw.scalar("run", "deterministic", false)?,
        };

        Ok(Self {
            data,
            noise,
            model,
            method,
            turn,
            optim,
            run,
        })
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    /// One entry per point of the cartesian product of the sweep axes, in
    /// a fixed order (seed outermost).
    pub fn expand(&self) -> Vec<RunPoint> {
        let ratios = self.noise.as_ref().map_or(vec![0.0], |n| n.ratios.clone());
        let mut out = Vec::new();
        for &seed in &self.run.seeds {
            for &ratio in &ratios {
                for &tau in &self.turn.tau {
                    for &e_lp in &self.turn.e_lp {
                        for &e_fft in &self.turn.e_fft {
                            for &lp_lr in &self.optim.lp_lr {
                                for &fft_lr in &self.optim.fft_lr {
                                    out.push(RunPoint {
                                        index: out.len(),
                                        seed,
                                        ratio,
                                        tau,
                                        e_lp,
                                        e_fft,
                                        lp_lr,
                                        fft_lr,
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// One run of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunPoint {
    pub index: usize,
    pub seed: u64,
    pub ratio: f64,
    pub tau: f64,
    pub e_lp: usize,
    pub e_fft: usize,
    pub lp_lr: f64,
    pub fft_lr: f64,
}

impl RunPoint {
    pub fn run_id(&self) -> String {
        format!("run-{:04}", self.index)
    }
}

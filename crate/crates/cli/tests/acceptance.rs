//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Benchmark criteria use the reference setup from
//! `turnlnl::bench` on seeds 0, 1 and 2.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use turnlnl::bench::{prepare, Benchmark, BenchmarkSpec};
use turnlnl::dataset::{read_dataset, write_dataset, DataKind, Dataset, UNKNOWN_LABEL};
use turnlnl::losses::{ElrConfig, GceConfig, LossKind};
use turnlnl::model::{ExtractorMode, TuningMode};
use turnlnl::noise::{
    cifar100_superclass_groups, inject_asymmetric, inject_instance, inject_symmetric, successor_table,
};
use turnlnl::pipeline::{run_baseline, run_lp, run_turn, CleansingMode, EvalSets, RunReport, Stage};
use turnlnl::select::{fit_gmm1d, per_sample_losses, select_clean, EmConfig, SelectionConfig};
use turnlnl_cli::output::read_summary;

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn majority(votes: &[bool]) -> bool {
    2 * votes.iter().filter(|&&v| v).count() > votes.len()
}

fn fmt_votes(votes: &[bool]) -> String {
    votes.iter().map(|&v| if v { '+' } else { '-' }).collect()
}

// 1 ---------------------------------------------------------------------

fn gradients() -> Verdict {
    use common::LossUnderTest as L;
    const N: usize = 120;
    let mut worst: Vec<(String, f64)> = Vec::new();
    for (name, which, seed) in [
        ("ce", L::Ce, 101),
        ("gce q=0.3", L::Gce(0.3), 102),
        ("gce q=0.7", L::Gce(0.7), 103),
        ("gce q=1.0", L::Gce(1.0), 104),
        ("elr", L::Elr, 105),
    ] {
        let (errs, _) = common::loss_gradient_errors(which, N, seed);
        assert_eq!(errs.len(), N);
        worst.push((name.into(), errs.iter().cloned().fold(0.0, f64::max)));
    }
    for (name, mode, ext, seed) in [
        ("model lp", TuningMode::Lp, ExtractorMode::Mlp, 106),
        ("model fft", TuningMode::Fft, ExtractorMode::Mlp, 107),
        ("adapter fft", TuningMode::Fft, ExtractorMode::ResidualAdapter, 108),
    ] {
        let errs = common::model_gradient_errors(mode, ext, N, seed);
        assert_eq!(errs.len(), N);
        worst.push((name.into(), errs.iter().cloned().fold(0.0, f64::max)));
    }
    let pass = worst.iter().all(|(_, e)| *e < common::FD_TOLERANCE);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    Verdict::new(pass, format!("{N} instances each, max rel err: {detail}"))
}

// 2 ---------------------------------------------------------------------

fn random_em_input(r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    let n = r.random_range(2..300);
    match r.random_range(0..3) {
        0 => (0..n).map(|_| r.random::<f64>()).collect(),
        1 => {
            let (a, b) = (r.random::<f64>(), r.random::<f64>());
            common::mixture_draws(n, r.random(), a, 0.01 + 0.1 * r.random::<f64>(), b, 0.01 + 0.2 * r.random::<f64>(), r.random())
        }
        _ => (0..n).map(|_| r.random::<f64>().powi(4)).collect(),
    }
}

fn gmm() -> Verdict {
    let values = common::mixture_draws(5000, 0.4, 0.1, 0.02, 0.8, 0.05, 201);
    let g = fit_gmm1d(&values, &EmConfig::default()).expect("fit").gmm;
    let recovered = (g.means[0] - 0.1).abs() <= 0.02
        && (g.means[1] - 0.8).abs() <= 0.02
        && (g.weights[0] - 0.4).abs() <= 0.05
        && (g.weights[1] - 0.6).abs() <= 0.05;

    let mut r = common::rng(202);
    let mut decreases = 0;
    for _ in 0..1000 {
        let fit = fit_gmm1d(&random_em_input(&mut r), &EmConfig::default()).expect("fit");
        decreases += fit.log_likelihood.windows(2).filter(|w| w[1] < w[0] - 1e-9).count();
    }
    Verdict::new(
        recovered && decreases == 0,
        format!(
            "means {:.4}/{:.4} weights {:.4}/{:.4}; LL decreases over 1000 inputs: {decreases}",
            g.means[0], g.means[1], g.weights[0], g.weights[1]
        ),
    )
}

// 3 ---------------------------------------------------------------------

fn injectors() -> Verdict {
    let data = common::balanced_dataset(100, 100, 4, 301);
    let truth = data.given_labels();
    let sym = inject_symmetric(&data, 0.6, 302).expect("symmetric");
    let identity = (0..data.len())
        .filter(|&i| sym.flip_mask[i] != (sym.dataset.given_labels()[i] != truth[i]))
        .count();
    let sym_ok = sym.flip_count() == 6000 && identity == 0;

    let groups = cifar100_superclass_groups();
    let next = successor_table(&groups, 100).expect("groups");
    let data = common::balanced_dataset(100, 50, 2, 303);
    let asym = inject_asymmetric(&data, &groups, 0.4, 304).expect("asymmetric");
    let stray = (0..data.len())
        .filter(|&i| {
            let (t, g) = (data.given_labels()[i], asym.dataset.given_labels()[i]);
            g != t && g != next[t as usize]
        })
        .count();
    let asym_ok = stray == 0 && asym.flip_count() == 100 * 20;

    let data = common::balanced_dataset(10, 2000, 16, 305);
    let (inst, draw) = inject_instance(&data, 0.4, 0.1, 306).expect("instance");
    let n = data.len() as f64;
    let mean_q = draw.flip_rates.iter().sum::<f64>() / n;
    let sd = draw.flip_rates.iter().map(|q| q * (1.0 - q)).sum::<f64>().sqrt() / n;
    let inst_ok = (inst.flip_fraction() - mean_q).abs() < 3.0 * sd;

    let data = common::balanced_dataset(10, 5000, 8, 307);
    let (half, _) = inject_instance(&data, 0.0, 0.1, 308).expect("instance");
    let half_ok = (half.flip_fraction() - 0.0798).abs() <= 0.01;

    Verdict::new(
        sym_ok && asym_ok && inst_ok && half_ok,
        format!(
            "symmetric flips {} (want 6000); asymmetric strays {stray}; instance {:.4} vs mean q {mean_q:.4} (3 sd {:.4}); ratio 0 std 0.1 {:.4}",
            sym.flip_count(),
            inst.flip_fraction(),
            3.0 * sd,
            half.flip_fraction()
        ),
    )
}

// 4-7 -------------------------------------------------------------------

struct Prepared {
    spec: BenchmarkSpec,
    bench: Benchmark,
}

impl Prepared {
    fn new(seed: u64) -> Self {
        let spec = BenchmarkSpec::s1(seed);
        let bench = prepare(&spec).expect("benchmark");
        Self { spec, bench }
    }

    fn seed(&self) -> u64 {
        self.spec.data.seed
    }

    fn eval(&self) -> EvalSets<'_> {
        EvalSets { test: &self.bench.splits.test, valid: None }
    }

    fn noisy(&self, ratio: f64) -> Dataset {
        inject_symmetric(&self.bench.splits.train, ratio, self.seed()).expect("noise").dataset
    }

    fn baseline(&self, train: &Dataset, loss: LossKind, tuning: TuningMode) -> RunReport {
        let cfg = self.spec.baseline_config(loss, tuning, self.seed());
        run_baseline(&self.bench.model, train, self.eval(), &cfg).expect("baseline").0
    }

    fn turn(&self, train: &Dataset, edit: impl FnOnce(&mut turnlnl::pipeline::TurnConfig)) -> RunReport {
        let mut cfg = self.spec.turn_config(self.seed());
        edit(&mut cfg);
        run_turn(&self.bench.model, train, self.eval(), &cfg).expect("turn").0
    }
}

fn losses() -> [LossKind; 3] {
    [LossKind::Ce, LossKind::Gce(GceConfig::default()), LossKind::Elr(ElrConfig::default())]
}

fn lp_vs_fft(benches: &[Prepared]) -> Verdict {
    let mut votes = Vec::new();
    let mut lines = Vec::new();
    for p in benches {
        let mut accs = Vec::new();
        for ratio in [0.9, 0.1] {
            let train = p.noisy(ratio);
            let lp = p.baseline(&train, LossKind::Ce, TuningMode::Lp).best_acc;
            let fft = p.baseline(&train, LossKind::Ce, TuningMode::Fft).best_acc;
            accs.push((lp, fft));
        }
        let ok = accs[0].0 >= accs[0].1 && accs[1].1 >= accs[1].0;
        votes.push(ok);
        lines.push(format!(
            "seed {}: 0.9 lp {:.3} fft {:.3}; 0.1 lp {:.3} fft {:.3}",
            p.seed(),
            accs[0].0,
            accs[0].1,
            accs[1].0,
            accs[1].1
        ));
    }
    Verdict::new(majority(&votes), format!("votes {} | {}", fmt_votes(&votes), lines.join(" | ")))
}

fn turn_beats_baselines(benches: &[Prepared]) -> Verdict {
    let mut votes = Vec::new();
    let mut lines = Vec::new();
    for p in benches {
        let mut ok = true;
        for ratio in [0.6, 0.9] {
            let train = p.noisy(ratio);
            let turn = p.turn(&train, |_| {});
            let mut best_base = (String::new(), f64::MIN);
            let mut ce_fft = 0.0;
            for loss in losses() {
                for tuning in [TuningMode::Lp, TuningMode::Fft] {
                    let acc = p.baseline(&train, loss, tuning).best_acc;
                    if acc > best_base.1 {
                        best_base = (format!("{}-{}", loss.name(), tuning.as_str()), acc);
                    }
                    if loss == LossKind::Ce && tuning == TuningMode::Fft {
                        ce_fft = acc;
                    }
                }
            }
            let beats = turn.best_acc > best_base.1;
            let margin = turn.best_acc - ce_fft;
            ok &= beats && (ratio < 0.9 || margin >= 0.05);
            lines.push(format!(
                "seed {} r {ratio}: turn {:.3} best baseline {} {:.3} margin vs ce-fft {:+.3}",
                p.seed(),
                turn.best_acc,
                best_base.0,
                best_base.1,
                margin
            ));
        }
        votes.push(ok);
    }
    Verdict::new(majority(&votes), format!("votes {} | {}", fmt_votes(&votes), lines.join(" | ")))
}

fn cleansing_ablation(p: &Prepared) -> Verdict {
    let train = p.noisy(0.9);
    let multiple = p.turn(&train, |c| c.cleansing = CleansingMode::Multiple);
    let once = p.turn(&train, |c| c.cleansing = CleansingMode::Once);
    let none = p.turn(&train, |c| c.cleansing = CleansingMode::None);
    let no_lp = p.turn(&train, |c| c.lp_enabled = false);
    let order = multiple.last_acc >= once.last_acc && once.last_acc > none.last_acc;
    let lp_helps = no_lp.last_acc < multiple.last_acc;
    Verdict::new(
        order && lp_helps,
        format!(
            "last (best): multiple {:.3} ({:.3}), once {:.3} ({:.3}), none {:.3} ({:.3}), no LP {:.3} ({:.3})",
            multiple.last_acc,
            multiple.best_acc,
            once.last_acc,
            once.best_acc,
            none.last_acc,
            none.best_acc,
            no_lp.last_acc,
            no_lp.best_acc
        ),
    )
}

/// Purity of one selection per threshold, all from the model after Step 1.
fn purity_by_tau(p: &Prepared, ratio: f64, taus: &[f64]) -> Vec<f64> {
    let train = p.noisy(ratio);
    let mut model = p.bench.model.clone();
    let cfg = p.spec.turn_config(p.seed());
    run_lp(&mut model, &train, p.eval(), &cfg).expect("lp");
    let losses = per_sample_losses(&model, &train).expect("losses");
    taus.iter()
        .map(|&tau| {
            let sel = SelectionConfig { tau, ..cfg.selection.clone() };
            select_clean(&losses, train.given_labels(), train.num_classes(), train.true_labels(), &sel)
                .expect("selection")
                .purity
                .expect("known truth")
        })
        .collect()
}

fn purity_vs_tau(p: &Prepared) -> Verdict {
    let high = purity_by_tau(p, 0.9, &[0.3, 0.6, 0.9]);
    let mid = purity_by_tau(p, 0.6, &[0.3])[0];
    let monotone = high.windows(2).all(|w| w[1] >= w[0]);
    Verdict::new(
        monotone && mid > 0.9,
        format!(
            "noise 0.9 purity at tau 0.3/0.6/0.9: {:.3}/{:.3}/{:.3}; noise 0.6 tau 0.3: {mid:.3}",
            high[0], high[1], high[2]
        ),
    )
}

// 8 ---------------------------------------------------------------------

const GEN_CONFIG: &str = "\
[data]
classes = 6
dim = 12
feature_dim = 8
train_per_class = 40
test_per_class = 10
pretrain_per_class = 40

[noise]
kind = instance
ratio = 0.3

[model]
hidden = 16
pretrain_epochs = 2

[turn]
e_lp = 3
e_fft = 2
tau = 0.3, 0.6

[run]
seed = 4
";

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("read dir") {
            let path = entry.expect("entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, fs::read(&path).expect("read")));
            }
        }
    }
    out.sort();
    out
}

fn cli(args: &[&str], config: &Path, out: &Path) -> bool {
    Command::new(env!("CARGO_BIN_EXE_turnlnl"))
        .env_remove("TURNLNL_SEED")
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .status()
        .expect("spawn cli")
        .success()
}

fn random_dataset(r: &mut rand_chacha::ChaCha8Rng) -> Dataset {
    let n = r.random_range(0..60);
    let d = r.random_range(1..10);
    let c = r.random_range(1..8);
    let x = Array2::from_shape_fn((n, d), |_| (r.random::<f64>() * 200.0 - 100.0) as f32 as f64);
    let given: Vec<u32> = (0..n).map(|_| r.random_range(0..c) as u32).collect();
    let truth = match r.random_range(0..3) {
        0 => None,
        1 => Some(given.clone()),
        _ => Some(
            (0..n)
                .map(|_| if r.random::<f64>() < 0.2 { UNKNOWN_LABEL } else { r.random_range(0..c) as u32 })
                .collect(),
        ),
    };
    let kind = if r.random::<bool>() { DataKind::Raw } else { DataKind::Feature };
    Dataset::new(x, given, truth, c, kind).expect("dataset")
}

fn determinism_and_formats() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = tmp.path().join("acc.ini");
    fs::write(&config, GEN_CONFIG).expect("write config");

    let (g1, g2) = (tmp.path().join("gen1"), tmp.path().join("gen2"));
    let gen_ok = cli(&["gen"], &config, &g1) && cli(&["gen"], &config, &g2);
    let bundles_equal = gen_ok && tree_bytes(&g1) == tree_bytes(&g2) && !tree_bytes(&g1).is_empty();

    let (r1, r2) = (tmp.path().join("run1"), tmp.path().join("run2"));
    let run_ok = cli(&["run", "--deterministic"], &config, &r1) && cli(&["run", "--deterministic"], &config, &r2);
    let strip = |p: &Path| {
        read_summary(&p.join("summary.csv"))
            .expect("summary")
            .into_iter()
            .map(|row| turnlnl_cli::output::SummaryRow { wall_ms: 0.0, ..row })
            .collect::<Vec<_>>()
    };
    let summaries_equal = run_ok && {
        let (a, b) = (strip(&r1), strip(&r2));
        a.len() == 2 && a == b
    };

    let mut r = common::rng(801);
    let mut roundtrips = 0;
    for k in 0..100 {
        let ds = random_dataset(&mut r);
        let dir = tmp.path().join(format!("rt{k}"));
        write_dataset(&ds, &dir).expect("write");
        if read_dataset(&dir).map(|back| back == ds).unwrap_or(false) {
            roundtrips += 1;
        }
    }
    Verdict::new(
        bundles_equal && summaries_equal && roundtrips == 100,
        format!("bundles identical: {bundles_equal}; summary identical: {summaries_equal}; roundtrips {roundtrips}/100"),
    )
}

// 9 ---------------------------------------------------------------------

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn efficiency(p: &Prepared) -> Verdict {
    let train = p.noisy(0.9);
    let turn = p.turn(&train, |_| {});
    let full = p.baseline(&train, LossKind::Ce, TuningMode::Fft);
    let step2: Vec<f64> = turn.records.iter().filter(|r| r.stage == Stage::Fft).map(|r| r.wall_ms).collect();
    let full_ms = median(full.records.iter().map(|r| r.wall_ms).collect());
    let step2_ms = median(step2);
    let total = train.len();
    let classes = train.num_classes();
    let worst_subset = turn.selections.iter().map(|(_, s)| s.quota * classes).max().unwrap_or(total);
    let small = 2 * worst_subset <= total;
    for (epoch, s) in &turn.selections {
        println!("  epoch {epoch}: N = {}, N*C = {} of {total}", s.quota, s.quota * classes);
    }
    Verdict::new(
        small && step2_ms < full_ms,
        format!("median Step-2 epoch {step2_ms:.1} ms vs full-data FFT epoch {full_ms:.1} ms; largest N*C {worst_subset} of {total}"),
    )
}

fn literal_separation_note() -> String {
    let mut spec = BenchmarkSpec::s1(0);
    spec.data.separation = 3.0;
    let p = Prepared { bench: prepare(&spec).expect("benchmark"), spec };
    let train = p.noisy(0.6);
    let turn = p.turn(&train, |_| {}).best_acc;
    let ce_fft = p.baseline(&train, LossKind::Ce, TuningMode::Fft).best_acc;
    let ce_lp = p.baseline(&train, LossKind::Ce, TuningMode::Lp).best_acc;
    format!("separation 3, seed 0, symmetric 0.6: turn {turn:.3}, ce-lp {ce_lp:.3}, ce-fft {ce_fft:.3}")
}

fn main() {
    let start = Instant::now();
    let mut verdicts: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |id: usize, name: &'static str, v: Verdict| {
        println!("{} {id} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        verdicts.push((id, name, v));
    };

    report(1, "gradient suite", gradients());
    report(2, "mixture fit", gmm());
    report(3, "noise injectors", injectors());

    let benches: Vec<Prepared> = SEEDS.iter().map(|&s| Prepared::new(s)).collect();
    report(4, "probing vs fine-tuning", lp_vs_fft(&benches));
    report(5, "two-step vs baselines", turn_beats_baselines(&benches));
    report(6, "cleansing and probing ablation", cleansing_ablation(&benches[0]));
    report(7, "purity vs threshold", purity_vs_tau(&benches[0]));
    report(8, "determinism and formats", determinism_and_formats());
    report(9, "step-2 efficiency", efficiency(&benches[0]));

    println!("INFO {}", literal_separation_note());
    let failed: Vec<usize> = verdicts.iter().filter(|v| !v.2.pass).map(|v| v.0).collect();
    println!(
        "{} of 9 criteria passed in {:.1}s",
        9 - failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}

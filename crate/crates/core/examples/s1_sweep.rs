//! Runs the two-step method and the six single-loss baselines on the
//! reference benchmark at several symmetric noise ratios.
//!
//! ```text
//! cargo run --release -p turnlnl --example s1_sweep -- 0
//! ```

use std::time::Instant;

use turnlnl::bench::{prepare, BenchmarkSpec};
use turnlnl::losses::{ElrConfig, GceConfig, LossKind};
use turnlnl::model::TuningMode;
use turnlnl::noise::{NoiseKind, NoiseSpec};
use turnlnl::pipeline::{run_baseline, run_turn, EvalSets};

fn main() -> turnlnl::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let spec = BenchmarkSpec::s1(seed);
    let bench = prepare(&spec)?;
    let eval = EvalSets { test: &bench.splits.test, valid: None };
    println!("{:<6} {:<8} {:>7} {:>7} {:>8}", "ratio", "method", "best", "last", "ms");
    for ratio in [0.0, 0.1, 0.6, 0.9] {
        let noise = NoiseSpec { kind: NoiseKind::Symmetric, ratio, seed, ..NoiseSpec::default() };
        let (noisy, _) = noise.apply(&bench.splits.train)?;
        let train = &noisy.dataset;
        for loss in [LossKind::Ce, LossKind::Gce(GceConfig::default()), LossKind::Elr(ElrConfig::default())] {
            for tuning in [TuningMode::Lp, TuningMode::Fft] {
                let t = Instant::now();
                let (r, _) = run_baseline(&bench.model, train, eval, &spec.baseline_config(loss, tuning, seed))?;
                let name = format!("{}-{}", loss.name(), tuning.as_str());
                println!("{ratio:<6} {name:<8} {:>7.4} {:>7.4} {:>8.0}", r.best_acc, r.last_acc, t.elapsed().as_secs_f64() * 1e3);
            }
        }
        let t = Instant::now();
        let (r, _) = run_turn(&bench.model, train, eval, &spec.turn_config(seed))?;
        println!("{ratio:<6} {:<8} {:>7.4} {:>7.4} {:>8.0}", "turn", r.best_acc, r.last_acc, t.elapsed().as_secs_f64() * 1e3);
    }
    Ok(())
}

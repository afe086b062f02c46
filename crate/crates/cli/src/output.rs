//! Run outputs: per-epoch `metrics.jsonl`, the `summary.csv` table and the
//! pivoted report.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use turnlnl::pipeline::{EpochRecord, RunReport};
use turnlnl::Error;

pub const SUMMARY_FILE: &str = "summary.csv";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SELECTION_FILE: &str = "selection.txt";

pub(crate) fn io_err(path: &Path, e: impl ToString) -> Error {
    Error::DataAt {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

#[derive(Debug, Serialize)]
pub struct MetricsLine<'a> {
    pub run_id: &'a str,
    pub stage: &'static str,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub val_acc: Option<f64>,
    pub selected: usize,
    pub purity: Option<f64>,
    pub wall_ms: f64,
}

impl<'a> MetricsLine<'a> {
    pub fn new(run_id: &'a str, r: &EpochRecord) -> Self {
        Self {
            run_id,
            stage: r.stage.as_str(),
            epoch: r.epoch,
            train_loss: r.train_loss,
            test_acc: r.test_acc,
            val_acc: r.val_acc,
            selected: r.selected,
            purity: r.purity,
            wall_ms: r.wall_ms,
        }
    }
}

pub fn write_metrics(path: &Path, run_id: &str, report: &RunReport) -> Result<(), Error> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &report.records {
        let line = serde_json::to_string(&MetricsLine::new(run_id, r)).map_err(|e| io_err(path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// One row of `summary.csv`. Columns, in order: run_id, method, tuning,
/// noise, ratio, tau, e_lp, e_fft, lp_lr, fft_lr, seed, best, last, purity,
/// wall_ms. Settings that do not apply to a method are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run_id: String,
    pub method: String,
    pub tuning: String,
    pub noise: String,
    pub ratio: f64,
    pub tau: Option<f64>,
    pub e_lp: Option<usize>,
    pub e_fft: Option<usize>,
    pub lp_lr: Option<f64>,
    pub fft_lr: Option<f64>,
    pub seed: u64,
    pub best: f64,
    pub last: f64,
    pub purity: Option<f64>,
    pub wall_ms: f64,
}

impl SummaryRow {
    /// Every column except `run_id` and the results.
    fn setting_key(&self) -> String {
        format!(
            "{}|{}|{}|{}|{:?}|{:?}|{:?}|{:?}|{:?}|{}",
            self.method, self.tuning, self.noise, self.ratio, self.tau, self.e_lp, self.e_fft, self.lp_lr, self.fft_lr, self.seed
        )
    }
}

/// Appends rows to `summary.csv`, writing the header only for a new file.
pub struct SummaryWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl SummaryWriter {
    pub fn open(dir: &Path) -> Result<Self, Error> {
        let path = dir.join(SUMMARY_FILE);
        let fresh = !path.exists() || std::fs::metadata(&path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let inner = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { path, inner })
    }

    pub fn append(&mut self, row: &SummaryRow) -> Result<(), Error> {
        self.inner.serialize(row).map_err(|e| io_err(&self.path, e))?;
        self.inner.flush().map_err(|e| io_err(&self.path, e))
    }
}

pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>, Error> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    reader
        .deserialize()
        .map(|row| row.map_err(|e| io_err(path, e)))
        .collect()
}

/// Drops rows whose settings and seed repeat an earlier row.
pub fn dedup(rows: Vec<SummaryRow>) -> Vec<SummaryRow> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        if seen.insert(row.setting_key()) {
            out.push(row);
        } else {
            log::warn!("duplicate summary row for {} {} seed {} dropped", row.method, row.tuning, row.seed);
        }
    }
    out
}

fn row_rank(method: &str, tuning: &str) -> (usize, String) {
    const ORDER: [&str; 7] = ["ce-lp", "ce-fft", "gce-lp", "gce-fft", "elr-lp", "elr-fft", "turn"];
    let label = row_label(method, tuning);
    let rank = ORDER.iter().position(|o| *o == label).unwrap_or(ORDER.len());
    (rank, label)
}

fn row_label(method: &str, tuning: &str) -> String {
    if method == "turn" {
        method.to_string()
    } else {
        format!("{method}-{tuning}")
    }
}

/// Pivot: one line per method and tuning, one column per noise kind and
/// ratio. Cells hold `best / last` test accuracy in percent, averaged over
/// the rows that fall in them (typically seeds).
pub fn pivot(rows: &[SummaryRow]) -> String {
    // (noise kind, ratio bits) -> (sum best, sum last, count)
    type Row = BTreeMap<(String, u64), (f64, f64, usize)>;
    let mut cells: BTreeMap<(usize, String), Row> = BTreeMap::new();
    let mut columns: BTreeMap<(String, u64), String> = BTreeMap::new();
    for r in rows {
        let col = (r.noise.clone(), r.ratio.to_bits());
        columns.insert(col.clone(), format!("{} {}", r.noise, r.ratio));
        let cell = cells
            .entry(row_rank(&r.method, &r.tuning))
            .or_default()
            .entry(col)
            .or_insert((0.0, 0.0, 0));
        cell.0 += r.best;
        cell.1 += r.last;
        cell.2 += 1;
    }
    let mut out = String::from("method");
    for name in columns.values() {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for ((_, label), row) in &cells {
        out.push_str(label);
        for col in columns.keys() {
            out.push(',');
            if let Some(&(b, l, n)) = row.get(col) {
                let n = n as f64;
                out.push_str(&format!("{:.2} / {:.2}", 100.0 * b / n, 100.0 * l / n));
            }
        }
        out.push('\n');
    }
    out
}

//! Bundle directory layout:
//!
//! * `features.tfv`: magic `TURNFV01`, then `N`, `D`, `C` as little-endian
//!   `u64`, then `N * D` little-endian `f32` values in row-major order.
//! * `given_labels.tlb`, `true_labels.tlb` (optional): magic `TURNLB01`, `N`
//!   as `u64`, then `N` little-endian `u32` labels. `0xFFFFFFFF` marks an
//!   unknown true label.
//! * `meta.txt`: `key = value` lines; `kind` and `classes` are required.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{DataKind, Dataset, UNKNOWN_LABEL};
use crate::error::{Error, Result};

pub const FEATURES_MAGIC: &[u8; 8] = b"TURNFV01";
pub const LABELS_MAGIC: &[u8; 8] = b"TURNLB01";

const FEATURES_FILE: &str = "features.tfv";
const GIVEN_FILE: &str = "given_labels.tlb";
const TRUE_FILE: &str = "true_labels.tlb";
const META_FILE: &str = "meta.txt";

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::data_at(dir, e))?;

    let (n, d) = dataset.inputs().dim();
    let mut buf = Vec::with_capacity(32 + n * d * 4);
    buf.extend_from_slice(FEATURES_MAGIC);
    for v in [n, d, dataset.num_classes()] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for &v in dataset.inputs().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(&dir.join(FEATURES_FILE), &buf)?;

    write_file(&dir.join(GIVEN_FILE), &encode_labels(dataset.given_labels()))?;
    let true_path = dir.join(TRUE_FILE);
    match dataset.true_labels() {
        Some(t) => write_file(&true_path, &encode_labels(t))?,
        None if true_path.exists() => {
            fs::remove_file(&true_path).map_err(|e| Error::data_at(&true_path, e))?
        }
        None => {}
    }

    let meta = format!(
        "kind = {}\nclasses = {}\n",
        dataset.kind().as_str(),
        dataset.num_classes()
    );
    write_file(&dir.join(META_FILE), meta.as_bytes())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(META_FILE);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::data_at(&meta_path, e))?;
    let (kind, classes) = parse_meta(&meta).map_err(|m| Error::data_at(&meta_path, m))?;

    let feat_path = dir.join(FEATURES_FILE);
    let bytes = fs::read(&feat_path).map_err(|e| Error::data_at(&feat_path, e))?;
    let inputs = decode_features(&bytes, classes).map_err(|m| Error::data_at(&feat_path, m))?;
    if inputs.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!(
            "non-finite feature in {}",
            feat_path.display()
        )));
    }
    let n = inputs.nrows();

    let given_path = dir.join(GIVEN_FILE);
    let given = read_labels(&given_path, n)?;
    if let Some(bad) = given.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::data_at(
            &given_path,
            format!("label {bad} out of range for {classes} classes"),
        ));
    }

    let true_path = dir.join(TRUE_FILE);
    let truth = if true_path.exists() {
        let t = read_labels(&true_path, n)?;
        if let Some(bad) = t.iter().find(|&&y| y != UNKNOWN_LABEL && y as usize >= classes) {
            return Err(Error::data_at(
                &true_path,
                format!("label {bad} out of range for {classes} classes"),
            ));
        }
        Some(t)
    } else {
        None
    };

    Dataset::new(inputs, given, truth, classes, kind)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::data_at(path, e))
}

fn encode_labels(labels: &[u32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + labels.len() * 4);
    buf.extend_from_slice(LABELS_MAGIC);
    buf.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    for &y in labels {
        buf.extend_from_slice(&y.to_le_bytes());
    }
    buf
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn decode_features(bytes: &[u8], classes: usize) -> Result<Array2<f64>, String> {
    if bytes.len() < 32 || &bytes[..8] != FEATURES_MAGIC {
        return Err("unrecognized format".into());
    }
    let n = read_u64(bytes, 8) as usize;
    let d = read_u64(bytes, 16) as usize;
    let c = read_u64(bytes, 24) as usize;
    if c != 0 && c != classes {
        return Err(format!("header says {c} classes, meta.txt says {classes}"));
    }
    let expected = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(32))
        .ok_or("dimensions overflow")?;
    if bytes.len() != expected {
        return Err(format!(
            "expected {expected} bytes for {n}x{d} features, found {}",
            bytes.len()
        ));
    }
    let values = bytes[32..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Array2::from_shape_vec((n, d), values).map_err(|e| e.to_string())
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<u32>> {
    let bytes = fs::read(path).map_err(|e| Error::data_at(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != LABELS_MAGIC {
        return Err(Error::data_at(path, "unrecognized format"));
    }
    let count = read_u64(&bytes, 8) as usize;
    if count != n {
        return Err(Error::data_at(
            path,
            format!("{count} labels but features have {n} rows"),
        ));
    }
    if bytes.len() != 16 + 4 * count {
        return Err(Error::data_at(path, "truncated label file"));
    }
    Ok(bytes[16..]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}

fn parse_meta(text: &str) -> Result<(DataKind, usize), String> {
    let mut kind = None;
    let mut classes = None;
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("malformed line `{line}`"))?;
        match key.trim() {
            "kind" => kind = Some(value.trim().parse::<DataKind>().map_err(|e| e.to_string())?),
            "classes" => {
                classes = Some(
                    value
                        .trim()
                        .parse::<usize>()
                        .map_err(|_| format!("bad classes value `{}`", value.trim()))?,
                )
            }
            _ => {}
        }
    }
    Ok((
        kind.ok_or("missing `kind`")?,
        classes.ok_or("missing `classes`")?,
    ))
}

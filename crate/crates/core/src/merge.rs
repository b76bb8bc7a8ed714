//! Linear interpolation of named f32 parameter maps and Pareto-zone
//! classification of (accuracy, ECE) results.
//!
//! # `.tmap` container
//!
//! ```text
//! 8 bytes   magic  b"TMAPv001"
//! 8 bytes   header length H, u64 little-endian
//! H bytes   UTF-8 JSON: {"<name>": {"shape": [..], "dtype": "f32", "offset": <bytes>}, ...}
//! ...       payload: each tensor's f32 values, little-endian, row-major,
//!           concatenated in name order; offsets are relative to payload start
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"TMAPv001";
pub const DEFAULT_GRID: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("tensor {0:?} has different shapes in the two maps")]
    ShapeMismatch(String),
    #[error("tensor {0:?} is missing from one of the maps")]
    MissingTensor(String),
    #[error("tensor {name:?}: {len} values do not fill shape {shape:?}")]
    BadLength {
        name: String,
        shape: Vec<usize>,
        len: usize,
    },
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("lambda grid must be sorted ascending")]
    UnsortedGrid,
    #[error("malformed tmap at byte {offset}: {reason}")]
    Malformed { offset: u64, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no row for baseline {0:?}")]
    MissingBaseline(String),
    #[error("results table {path}: {message}")]
    Table { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self { shape, data }
    }

    fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Bitwise equality (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap {
    pub entries: BTreeMap<String, Tensor>,
}

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn validate(&self) -> Result<(), MergeError> {
        for (name, t) in &self.entries {
            if t.numel() != t.data.len() {
                return Err(MergeError::BadLength {
                    name: name.clone(),
                    shape: t.shape.clone(),
                    len: t.data.len(),
                });
            }
        }
        Ok(())
    }

    pub fn bit_eq(&self, other: &TensorMap) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }
}

/// `(1 - λ)·base + λ·tuned`, elementwise in f32.
///
/// The endpoints return exact copies so that `λ = 0` and `λ = 1` are
/// bit-identical to their inputs even for `-0.0` and non-finite values.
pub fn merge(base: &TensorMap, tuned: &TensorMap, lambda: f64) -> Result<TensorMap, MergeError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MergeError::LambdaOutOfRange(lambda));
    }
    base.validate()?;
    tuned.validate()?;
    if let Some(name) = tuned.entries.keys().find(|k| !base.entries.contains_key(*k)) {
        return Err(MergeError::MissingTensor(name.clone()));
    }
    let lam = lambda as f32;
    let keep = 1.0f32 - lam;
    let mut out = TensorMap::new();
    for (name, b) in &base.entries {
        let t = tuned
            .entries
            .get(name)
            .ok_or_else(|| MergeError::MissingTensor(name.clone()))?;
        if t.shape != b.shape {
            return Err(MergeError::ShapeMismatch(name.clone()));
        }
        let data = if lambda == 0.0 {
            b.data.clone()
        } else if lambda == 1.0 {
            t.data.clone()
        } else {
            b.data
                .iter()
                .zip(&t.data)
                .map(|(&x, &y)| keep * x + lam * y)
                .collect()
        };
        out.insert(name.clone(), Tensor::new(b.shape.clone(), data));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> MergeError + '_ {
    move |source| MergeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_tmap(map: &TensorMap) -> Result<Vec<u8>, MergeError> {
    map.validate()?;
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, t) in &map.entries {
        header.insert(
            name.clone(),
            HeaderEntry {
                shape: t.shape.clone(),
                dtype: "f32".into(),
                offset,
            },
        );
        offset += 4 * t.data.len() as u64;
    }
    let header = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::with_capacity(16 + header.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in map.entries.values() {
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode_tmap(bytes: &[u8]) -> Result<TensorMap, MergeError> {
    let bad = |offset: u64, reason: &str| MergeError::Malformed {
        offset,
        reason: reason.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad(bytes.len() as u64, "truncated preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad(0, "bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = 16u64
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| bad(8, "header length exceeds file size"))?;
    let header: BTreeMap<String, HeaderEntry> =
        serde_json::from_slice(&bytes[16..payload_start as usize])
            .map_err(|e| bad(16 + e.column() as u64, &format!("header json: {e}")))?;
    let payload = &bytes[payload_start as usize..];
    let mut map = TensorMap::new();
    for (name, h) in header {
        if h.dtype != "f32" {
            return Err(bad(16, &format!("tensor {name:?}: unsupported dtype {:?}", h.dtype)));
        }
        let n: usize = h.shape.iter().product();
        let end = h
            .offset
            .checked_add(4 * n as u64)
            .filter(|&e| e <= payload.len() as u64)
            .ok_or_else(|| {
                bad(
                    payload_start + h.offset,
                    &format!("tensor {name:?} runs past end of payload"),
                )
            })?;
        let data = payload[h.offset as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        map.insert(name, Tensor::new(h.shape, data));
    }
    Ok(map)
}

pub fn write_tmap(map: &TensorMap, path: &Path) -> Result<(), MergeError> {
    let bytes = encode_tmap(map)?;
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))
}

pub fn read_tmap(path: &Path) -> Result<TensorMap, MergeError> {
    decode_tmap(&fs::read(path).map_err(io_err(path))?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub lambda: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeManifest {
    pub base: PathBuf,
    pub tuned: PathBuf,
    pub outputs: Vec<ManifestEntry>,
}

pub fn merged_file_name(lambda: f64) -> String {
    format!("merged_lambda_{lambda:.2}.tmap")
}

/// Writes one merged file per λ into `out_dir` plus `merge_manifest.json`.
pub fn sweep(
    base_path: &Path,
    tuned_path: &Path,
    lambdas: &[f64],
    out_dir: &Path,
) -> Result<MergeManifest, MergeError> {
    if let Some(&l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(MergeError::LambdaOutOfRange(l));
    }
    if lambdas.windows(2).any(|w| w[0] > w[1]) {
        return Err(MergeError::UnsortedGrid);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut outputs = Vec::with_capacity(lambdas.len());
    if !lambdas.is_empty() {
        let base = read_tmap(base_path)?;
        let tuned = read_tmap(tuned_path)?;
        for &lambda in lambdas {
            let merged = merge(&base, &tuned, lambda)?;
            let path = out_dir.join(merged_file_name(lambda));
            write_tmap(&merged, &path)?;
            outputs.push(ManifestEntry { lambda, path });
        }
    }
    let manifest = MergeManifest {
        base: base_path.to_path_buf(),
        tuned: tuned_path.to_path_buf(),
        outputs,
    };
    let mpath = out_dir.join("merge_manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParetoZone {
    /// Higher accuracy and lower ECE than the baseline.
    ParetoSuperior,
    /// Higher accuracy bought with higher ECE.
    CalibrationCost,
    /// No accuracy gain and no ECE reduction.
    Dominated,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoRow {
    pub method: String,
    pub accuracy: f64,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoClass {
    pub method: String,
    pub zone: ParetoZone,
    pub delta_accuracy: f64,
    pub delta_ece: f64,
}

pub fn zone_for(delta_accuracy: f64, delta_ece: f64) -> ParetoZone {
    if delta_accuracy > 0.0 && delta_ece < 0.0 {
        ParetoZone::ParetoSuperior
    } else if delta_accuracy > 0.0 && delta_ece > 0.0 {
        ParetoZone::CalibrationCost
    } else if delta_accuracy <= 0.0 && delta_ece >= 0.0 {
        ParetoZone::Dominated
    } else {
        ParetoZone::Mixed
    }
}

/// Classifies every row against the row named `baseline`.
pub fn pareto_classify(rows: &[ParetoRow], baseline: &str) -> Result<Vec<ParetoClass>, MergeError> {
    let base = rows
        .iter()
        .find(|r| r.method == baseline)
        .ok_or_else(|| MergeError::MissingBaseline(baseline.to_string()))?;
    Ok(rows
        .iter()
        .map(|r| {
            let da = r.accuracy - base.accuracy;
            let de = r.ece - base.ece;
            ParetoClass {
                method: r.method.clone(),
                zone: zone_for(da, de),
                delta_accuracy: da,
                delta_ece: de,
            }
        })
        .collect())
}

#[derive(Deserialize)]
struct ResultLine {
    #[serde(default)]
    model: Option<String>,
    method: String,
    accuracy: f64,
    ece: f64,
}

/// Reads `(method, accuracy, ece)` rows from a CSV with at least those
/// columns. With `model` set, only rows whose `model` column matches are kept.
pub fn read_results_csv(path: &Path, model: Option<&str>) -> Result<Vec<ParetoRow>, MergeError> {
    let table_err = |message: String| MergeError::Table {
        path: path.to_path_buf(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| table_err(e.to_string()))?;
    let mut rows = Vec::new();
    for line in rdr.deserialize::<ResultLine>() {
        let line = line.map_err(|e| table_err(e.to_string()))?;
        if model.is_some_and(|m| line.model.as_deref() != Some(m)) {
            continue;
        }
        rows.push(ParetoRow {
            method: line.method,
            accuracy: line.accuracy,
            ece: line.ece,
        });
    }
    Ok(rows)
}

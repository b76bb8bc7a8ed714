//! Problems, generation records and their JSONL persistence.
//!
//! `problems.jsonl` holds one [`Problem`] per line. A run file holds a
//! `{"_meta": {...}}` line followed by one [`GenerationRecord`] per line.
//! Optional fields are omitted rather than written as `null`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::sigmoid;

/// Tolerance for checking a stored confidence against its logprobs.
pub const CONFIDENCE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line} (byte offset {byte_offset}): {message}")]
    Parse {
        line: usize,
        byte_offset: usize,
        message: String,
    },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("invariant violation at item {index}: {message}")]
    InvariantViolation { index: usize, message: String },
    #[error("run file is missing its leading _meta line")]
    MissingMetadata,
}

impl RecordError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        RecordError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Math,
    Code,
    Other,
}

/// A reasoning problem with its ground-truth answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    pub gold_answer: String,
    pub domain_tag: DomainTag,
    /// Function signature a code answer must define, e.g. `def solve(xs):`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<String>,
}

/// One sampled reasoning path together with its extracted answer,
/// correctness label and self-evaluation logprobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub problem_id: String,
    pub sample_index: u32,
    pub path: String,
    pub raw_answer: String,
    pub answer: String,
    pub correct: bool,
    pub logprob_yes: f64,
    pub logprob_no: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl GenerationRecord {
    /// Log-odds of the affirmative self-evaluation token.
    pub fn log_odds(&self) -> f64 {
        self.logprob_yes - self.logprob_no
    }

    /// Confidence implied by the logprobs, regardless of the stored field.
    pub fn implied_confidence(&self) -> f64 {
        sigmoid(self.log_odds())
    }

    /// Stored confidence, falling back to the one implied by the logprobs.
    pub fn confidence_or_implied(&self) -> f64 {
        self.confidence.unwrap_or_else(|| self.implied_confidence())
    }

    /// Checks the per-record invariants that do not need a problem set.
    pub fn check(&self) -> Result<(), String> {
        if !(self.logprob_yes.is_finite() && self.logprob_no.is_finite()) {
            return Err("logprobs must be finite".into());
        }
        if self.logprob_yes > 0.0 || self.logprob_no > 0.0 {
            return Err("logprobs must be <= 0".into());
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(format!("confidence {c} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model_name: String,
    pub decode_temperature: f64,
    pub k: u32,
    pub created_at: String,
    /// Curation iteration that consumed this run, 1-based.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
    /// Model or backend that produced the records (the previous iteration's model).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFile {
    pub metadata: RunMetadata,
    pub records: Vec<GenerationRecord>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    #[serde(rename = "_meta")]
    meta: RunMetadata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationRule {
    DanglingProblemId,
    DuplicateRecordKey,
    ConfidenceOutOfRange,
    ConfidenceMismatch,
    NonFiniteLogprob,
    PositiveLogprob,
    SampleIndexOutOfRange,
    TooManyRecords,
}

/// A broken run-file invariant. `record_index` is `None` for file-level rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_index: Option<usize>,
    pub rule: ViolationRule,
    pub detail: String,
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, RecordError> {
    let file = File::open(path).map_err(|e| RecordError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut line = String::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| RecordError::io(path, e))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let trimmed = line.trim_end_matches(['\n', '\r']);
        if !trimmed.trim().is_empty() {
            let value = serde_json::from_str::<T>(trimmed).map_err(|e| RecordError::Parse {
                line: line_no,
                byte_offset: offset + e.column().saturating_sub(1),
                message: e.to_string(),
            })?;
            out.push((line_no, value));
        }
        offset += n;
    }
    Ok(out)
}

fn write_lines<I, T>(path: &Path, head: Option<&MetaLine>, items: I) -> Result<(), RecordError>
where
    I: IntoIterator<Item = T>,
    T: Serialize,
{
    let file = File::create(path).map_err(|e| RecordError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| RecordError::io(path, e);
    if let Some(meta) = head {
        serde_json::to_writer(&mut w, meta).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Loads a problem set, rejecting duplicate ids and empty gold answers.
pub fn load_problems(path: &Path) -> Result<Vec<Problem>, RecordError> {
    let rows: Vec<(usize, Problem)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut problems = Vec::with_capacity(rows.len());
    for (i, (_, p)) in rows.into_iter().enumerate() {
        if !seen.insert(p.id.clone()) {
            return Err(RecordError::DuplicateId(p.id));
        }
        if p.gold_answer.trim().is_empty() {
            return Err(RecordError::InvariantViolation {
                index: i,
                message: format!("problem {:?} has an empty gold_answer", p.id),
            });
        }
        problems.push(p);
    }
    Ok(problems)
}

pub fn save_problems(problems: &[Problem], path: &Path) -> Result<(), RecordError> {
    write_lines(path, None, problems)
}

fn check_all(records: &[GenerationRecord]) -> Result<(), RecordError> {
    for (index, r) in records.iter().enumerate() {
        r.check()
            .map_err(|message| RecordError::InvariantViolation { index, message })?;
    }
    Ok(())
}

/// Writes records as JSONL in the given order.
pub fn save_records(records: &[GenerationRecord], path: &Path) -> Result<(), RecordError> {
    check_all(records)?;
    write_lines(path, None, records)
}

pub fn load_records(path: &Path) -> Result<Vec<GenerationRecord>, RecordError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, r)| r).collect())
}

pub fn save_run(run: &RunFile, path: &Path) -> Result<(), RecordError> {
    check_all(&run.records)?;
    let meta = MetaLine {
        meta: run.metadata.clone(),
    };
    write_lines(path, Some(&meta), &run.records)
}

pub fn load_run(path: &Path) -> Result<RunFile, RecordError> {
    let rows: Vec<(usize, serde_json::Value)> = read_jsonl(path)?;
    let mut rows = rows.into_iter();
    let (_, first) = rows.next().ok_or(RecordError::MissingMetadata)?;
    let meta: MetaLine = serde_json::from_value(first).map_err(|_| RecordError::MissingMetadata)?;
    let mut records = Vec::new();
    for (line, value) in rows {
        let r = serde_json::from_value(value).map_err(|e| RecordError::Parse {
            line,
            byte_offset: 0,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(RunFile {
        metadata: meta.meta,
        records,
    })
}

/// Checks every run-file invariant and returns the violations found.
pub fn validate_run(run: &RunFile, problems: &[Problem]) -> Vec<Violation> {
    let known: HashSet<&str> = problems.iter().map(|p| p.id.as_str()).collect();
    let mut keys: HashMap<(&str, u32), usize> = HashMap::new();
    let mut out = Vec::new();
    let mut push = |idx: Option<usize>, rule, detail: String| {
        out.push(Violation {
            record_index: idx,
            rule,
            detail,
        })
    };

    for (i, r) in run.records.iter().enumerate() {
        if !known.contains(r.problem_id.as_str()) {
            push(
                Some(i),
                ViolationRule::DanglingProblemId,
                format!("unknown problem id {:?}", r.problem_id),
            );
        }
        if let Some(first) = keys.insert((r.problem_id.as_str(), r.sample_index), i) {
            push(
                Some(i),
                ViolationRule::DuplicateRecordKey,
                format!(
                    "({:?}, {}) already used by record {first}",
                    r.problem_id, r.sample_index
                ),
            );
        }
        if run.metadata.k > 0 && r.sample_index >= run.metadata.k {
            push(
                Some(i),
                ViolationRule::SampleIndexOutOfRange,
                format!("sample_index {} >= K = {}", r.sample_index, run.metadata.k),
            );
        }
        if !(r.logprob_yes.is_finite() && r.logprob_no.is_finite()) {
            push(
                Some(i),
                ViolationRule::NonFiniteLogprob,
                "logprobs must be finite".into(),
            );
            continue;
        }
        if r.logprob_yes > 0.0 || r.logprob_no > 0.0 {
            push(
                Some(i),
                ViolationRule::PositiveLogprob,
                format!("logprobs ({}, {}) must be <= 0", r.logprob_yes, r.logprob_no),
            );
        }
        if let Some(c) = r.confidence {
            if !(0.0..=1.0).contains(&c) {
                push(
                    Some(i),
                    ViolationRule::ConfidenceOutOfRange,
                    format!("confidence {c} outside [0, 1]"),
                );
            } else {
                let implied = r.implied_confidence();
                if (c - implied).abs() > CONFIDENCE_TOLERANCE {
                    push(
                        Some(i),
                        ViolationRule::ConfidenceMismatch,
                        format!("stored {c} vs sigmoid(log-odds) {implied}"),
                    );
                }
            }
        }
    }

    let cap = problems.len() as u64 * u64::from(run.metadata.k);
    if run.records.len() as u64 > cap {
        push(
            None,
            ViolationRule::TooManyRecords,
            format!("{} records exceed {} problems x K={}", run.records.len(), problems.len(), run.metadata.k),
        );
    }
    out
}

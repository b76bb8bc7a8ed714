//! K-sample answer aggregation.
//!
//! Self-consistency (SC) picks the plurality answer. Confidence-informed
//! self-consistency (CISC) first turns per-path confidences into softmax
//! weights at temperature `t`, then sums the weights per answer. Both break
//! ties in favour of the answer seen first in path order.
//!
//! Two normalisations coexist: the softmax weights select the answer, while
//! the ensemble confidence reported for CISC is the raw-proportion score
//! `Σ_{i: a_i = a} c_i / Σ_j c_j`.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::normalize_answer;
use crate::metrics::{self, CalibrationReport, ScoredOutcome};
use crate::record::GenerationRecord;

/// Scores within this distance of the maximum count as tied.
///
/// At very large softmax temperatures the weights differ from uniform by
/// `O(Δc / t)`; without a tolerance those rounding-level differences would
/// override the first-seen tie-break that SC applies.
pub const TIE_EPSILON: f64 = 1e-9;

pub const DEFAULT_SOFTMAX_GRID: [f64; 7] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0];

#[derive(Debug, Error, PartialEq)]
pub enum EnsembleError {
    #[error("ensemble input has no paths")]
    EmptyInput,
    #[error("softmax temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),
    #[error("total confidence is zero")]
    ZeroTotalConfidence,
    #[error("{got} paths exceed the configured maximum of {max}")]
    TooManyPaths { got: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathVote {
    pub answer: String,
    pub confidence: f64,
}

impl PathVote {
    pub fn new(answer: impl Into<String>, confidence: f64) -> Self {
        Self {
            answer: answer.into(),
            confidence,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleInput {
    pub problem_id: String,
    pub paths: Vec<PathVote>,
}

impl EnsembleInput {
    pub fn new(problem_id: impl Into<String>, paths: Vec<PathVote>) -> Self {
        Self {
            problem_id: problem_id.into(),
            paths,
        }
    }

    pub fn check(&self, k_max: Option<usize>) -> Result<(), EnsembleError> {
        if self.paths.is_empty() {
            return Err(EnsembleError::EmptyInput);
        }
        match k_max {
            Some(max) if self.paths.len() > max => Err(EnsembleError::TooManyPaths {
                got: self.paths.len(),
                max,
            }),
            _ => Ok(()),
        }
    }

    /// The first `k` paths, in order.
    pub fn truncated(&self, k: usize) -> EnsembleInput {
        EnsembleInput {
            problem_id: self.problem_id.clone(),
            paths: self.paths.iter().take(k).cloned().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AggregationMode {
    #[serde(rename = "SC")]
    Sc,
    #[serde(rename = "CISC")]
    Cisc,
}

impl AggregationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::Sc => "SC",
            AggregationMode::Cisc => "CISC",
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AggregationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sc" => Ok(AggregationMode::Sc),
            "cisc" => Ok(AggregationMode::Cisc),
            other => Err(format!("unknown aggregation mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleDecision {
    pub answer: String,
    pub mode: AggregationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub softmax_temperature: Option<f64>,
    /// Per-answer scores in first-seen order; they sum to one.
    pub answer_scores: IndexMap<String, f64>,
    pub ensemble_confidence: f64,
    pub tie_broken: bool,
}

/// Winner under first-seen tie-break, and whether a tie was broken.
fn pick_winner(scores: &IndexMap<String, f64>) -> (String, f64, bool) {
    let max = scores.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut tied = scores.iter().filter(|(_, &s)| max - s <= TIE_EPSILON);
    let (answer, &score) = tied.next().expect("scores are non-empty");
    let tie_broken = tied.next().is_some();
    (answer.clone(), score, tie_broken)
}

pub fn self_consistency(input: &EnsembleInput) -> Result<EnsembleDecision, EnsembleError> {
    input.check(None)?;
    let m = input.paths.len() as f64;
    let mut counts: IndexMap<String, usize> = IndexMap::new();
    for p in &input.paths {
        *counts.entry(p.answer.clone()).or_default() += 1;
    }
    let answer_scores: IndexMap<String, f64> = counts
        .into_iter()
        .map(|(a, c)| (a, c as f64 / m))
        .collect();
    let (answer, score, tie_broken) = pick_winner(&answer_scores);
    Ok(EnsembleDecision {
        answer,
        mode: AggregationMode::Sc,
        softmax_temperature: None,
        answer_scores,
        ensemble_confidence: score,
        tie_broken,
    })
}

/// Softmax of the path confidences at temperature `t`, shifted by the max.
pub fn cisc_weights(input: &EnsembleInput, t: f64) -> Result<Vec<f64>, EnsembleError> {
    input.check(None)?;
    if !(t > 0.0) {
        return Err(EnsembleError::NonPositiveTemperature(t));
    }
    let max = input
        .paths
        .iter()
        .map(|p| p.confidence / t)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = input
        .paths
        .iter()
        .map(|p| (p.confidence / t - max).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn cisc(input: &EnsembleInput, t: f64) -> Result<EnsembleDecision, EnsembleError> {
    let weights = cisc_weights(input, t)?;
    let mut answer_scores: IndexMap<String, f64> = IndexMap::new();
    for (p, w) in input.paths.iter().zip(&weights) {
        *answer_scores.entry(p.answer.clone()).or_default() += w;
    }
    let (answer, score, tie_broken) = pick_winner(&answer_scores);
    let ensemble_confidence = match ensemble_confidence_raw(input, &answer) {
        Ok(c) => c,
        // all confidences zero: the softmax is uniform, so its score is the
        // vote fraction and the natural stand-in
        Err(EnsembleError::ZeroTotalConfidence) => score,
        Err(e) => return Err(e),
    };
    Ok(EnsembleDecision {
        answer,
        mode: AggregationMode::Cisc,
        softmax_temperature: Some(t),
        answer_scores,
        ensemble_confidence,
        tie_broken,
    })
}

/// Raw-proportion confidence of `answer`: its share of the summed path
/// confidences.
pub fn ensemble_confidence_raw(input: &EnsembleInput, answer: &str) -> Result<f64, EnsembleError> {
    let total: f64 = input.paths.iter().map(|p| p.confidence).sum();
    if total <= 0.0 {
        return Err(EnsembleError::ZeroTotalConfidence);
    }
    let mass: f64 = input
        .paths
        .iter()
        .filter(|p| p.answer == answer)
        .map(|p| p.confidence)
        .sum();
    Ok(mass / total)
}

pub fn aggregate(
    input: &EnsembleInput,
    mode: AggregationMode,
    t: f64,
) -> Result<EnsembleDecision, EnsembleError> {
    match mode {
        AggregationMode::Sc => self_consistency(input),
        AggregationMode::Cisc => cisc(input, t),
    }
}

/// Groups records per problem in first-appearance order, paths sorted by
/// sample index.
pub fn inputs_from_records(records: &[GenerationRecord]) -> Vec<EnsembleInput> {
    let mut grouped: IndexMap<&str, Vec<&GenerationRecord>> = IndexMap::new();
    for r in records {
        grouped.entry(r.problem_id.as_str()).or_default().push(r);
    }
    grouped
        .into_iter()
        .map(|(pid, mut rs)| {
            rs.sort_by_key(|r| r.sample_index);
            EnsembleInput::new(
                pid,
                rs.into_iter()
                    .map(|r| PathVote::new(r.answer.clone(), r.confidence_or_implied()))
                    .collect(),
            )
        })
        .collect()
}

fn is_correct(answer: &str, gold: Option<&String>) -> bool {
    gold.is_some_and(|g| normalize_answer(answer) == normalize_answer(g))
}

/// One per-problem decision inside a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub problem_id: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub mode: AggregationMode,
    pub answer: String,
    pub correct: bool,
    pub ensemble_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub mode: AggregationMode,
    pub n_problems: usize,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<CalibrationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutput {
    pub softmax_temperature: f64,
    pub rows: Vec<SweepRow>,
    pub decisions: Vec<EnsembleRow>,
}

/// Accuracy and ensemble-confidence calibration per `(K, mode)` cell.
///
/// `runs` maps each K to its per-problem inputs; use [`sweep_from_inputs`] to
/// derive every K from one run by keeping the first K sample indices.
pub fn scaling_sweep(
    runs: &BTreeMap<usize, Vec<EnsembleInput>>,
    modes: &[AggregationMode],
    t: f64,
    gold: &HashMap<String, String>,
    m_bins: usize,
) -> Result<SweepOutput, EnsembleError> {
    let mut rows = Vec::new();
    let mut decisions = Vec::new();
    for (&k, inputs) in runs {
        for &mode in modes {
            let mut outcomes = Vec::with_capacity(inputs.len());
            for input in inputs {
                // a single path makes every aggregation the same; route K=1
                // through SC so both cells are bit-identical
                let effective = if input.paths.len() == 1 {
                    AggregationMode::Sc
                } else {
                    mode
                };
                let d = aggregate(input, effective, t)?;
                let correct = is_correct(&d.answer, gold.get(&input.problem_id));
                outcomes.push(ScoredOutcome::new(d.ensemble_confidence, correct));
                decisions.push(EnsembleRow {
                    problem_id: input.problem_id.clone(),
                    k,
                    mode,
                    answer: d.answer,
                    correct,
                    ensemble_confidence: d.ensemble_confidence,
                });
            }
            let n = outcomes.len();
            let accuracy = if n == 0 {
                0.0
            } else {
                outcomes.iter().filter(|o| o.correct).count() as f64 / n as f64
            };
            rows.push(SweepRow {
                k,
                mode,
                n_problems: n,
                accuracy,
                report: metrics::full_report(&outcomes, m_bins).ok(),
            });
        }
    }
    Ok(SweepOutput {
        softmax_temperature: t,
        rows,
        decisions,
    })
}

/// Builds the per-K inputs of a sweep by truncating each problem to its first
/// K paths.
pub fn runs_by_k(inputs: &[EnsembleInput], ks: &[usize]) -> BTreeMap<usize, Vec<EnsembleInput>> {
    ks.iter()
        .map(|&k| (k, inputs.iter().map(|i| i.truncated(k)).collect()))
        .collect()
}

pub fn sweep_from_inputs(
    inputs: &[EnsembleInput],
    ks: &[usize],
    modes: &[AggregationMode],
    t: f64,
    gold: &HashMap<String, String>,
    m_bins: usize,
) -> Result<SweepOutput, EnsembleError> {
    scaling_sweep(&runs_by_k(inputs, ks), modes, t, gold, m_bins)
}

/// CISC accuracy for each softmax temperature in `grid`; the first best wins.
pub fn tune_softmax_temperature(
    inputs: &[EnsembleInput],
    gold: &HashMap<String, String>,
    grid: &[f64],
) -> Result<(f64, f64), EnsembleError> {
    let mut best: Option<(f64, f64)> = None;
    for &t in grid {
        let mut hits = 0usize;
        for input in inputs {
            let d = cisc(input, t)?;
            hits += usize::from(is_correct(&d.answer, gold.get(&input.problem_id)));
        }
        let acc = if inputs.is_empty() {
            0.0
        } else {
            hits as f64 / inputs.len() as f64
        };
        if best.is_none_or(|(_, a)| acc > a) {
            best = Some((t, acc));
        }
    }
    best.ok_or(EnsembleError::EmptyInput)
}

pub fn write_ensemble_csv(rows: &[EnsembleRow], path: &Path) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}

/// Accuracy table with one row per mode and one column per K.
pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> std::io::Result<()> {
    let mut ks: Vec<usize> = rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    let mut modes: Vec<AggregationMode> = rows.iter().map(|r| r.mode).collect();
    modes.sort();
    modes.dedup();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "ensemble")?;
    for k in &ks {
        write!(f, ",K={k}")?;
    }
    writeln!(f)?;
    for mode in modes {
        write!(f, "{mode}")?;
        for k in &ks {
            match rows.iter().find(|r| r.k == *k && r.mode == mode) {
                Some(r) => write!(f, ",{}", r.accuracy)?,
                None => write!(f, ",")?,
            }
        }
        writeln!(f)?;
    }
    f.flush()
}

/// Long-format reliability table: one line per `(K, mode)` cell.
pub fn write_sweep_reliability_csv(rows: &[SweepRow], path: &Path) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "K,mode,n_problems,accuracy,auroc,ece,brier")?;
    for r in rows {
        let (auroc, ece, brier) = match &r.report {
            Some(rep) => (
                rep.auroc.map(|a| a.to_string()).unwrap_or_default(),
                rep.ece.to_string(),
                rep.brier.to_string(),
            ),
            None => Default::default(),
        };
        writeln!(
            f,
            "{},{},{},{},{auroc},{ece},{brier}",
            r.k, r.mode, r.n_problems, r.accuracy
        )?;
    }
    f.flush()
}

//! Calibration and discrimination metrics over `(confidence, correct)` pairs.
//!
//! Bins are equal width. Bin `m` (1-based) covers `((m-1)/M, m/M]`, except the
//! first bin which is closed at zero, so `c = 1.0` lands in the top bin and
//! `c = 0.0` in the bottom one.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::sigmoid;
use crate::record::{GenerationRecord, CONFIDENCE_TOLERANCE};
use crate::temperature::TemperatureFit;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no outcomes to score")]
    EmptyInput,
    #[error("bin count must be >= 1")]
    ZeroBins,
    #[error("confidence {0} outside [0, 1]")]
    ConfidenceOutOfRange(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredOutcome {
    pub confidence: f64,
    pub correct: bool,
    /// Logit behind `confidence`, when known. AUROC ranks by it because
    /// `σ` rounds to exactly 1.0 in f64 once the logit passes ~37, which
    /// would merge distinct scores into ties.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_odds: Option<f64>,
}

impl ScoredOutcome {
    pub fn new(confidence: f64, correct: bool) -> Self {
        Self {
            confidence,
            correct,
            log_odds: None,
        }
    }

    pub fn from_log_odds(z: f64, correct: bool) -> Self {
        Self {
            confidence: sigmoid(z),
            correct,
            log_odds: Some(z),
        }
    }
}

impl From<&GenerationRecord> for ScoredOutcome {
    fn from(r: &GenerationRecord) -> Self {
        let implied = r.implied_confidence();
        match r.confidence {
            Some(c) if (c - implied).abs() > CONFIDENCE_TOLERANCE => Self::new(c, r.correct),
            _ => Self::from_log_odds(r.log_odds(), r.correct),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub index: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub n: usize,
    pub m_bins: usize,
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub brier: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auroc: Option<f64>,
    pub accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<TemperatureFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece_ts: Option<f64>,
}

fn edge(k: usize, m_bins: usize) -> f64 {
    k as f64 / m_bins as f64
}

/// 1-based bin index for a confidence, consistent with the stored f64 edges.
pub fn bin_index(confidence: f64, m_bins: usize) -> usize {
    let guess = (confidence * m_bins as f64).ceil();
    let mut m = if guess.is_nan() {
        1
    } else {
        (guess as usize).clamp(1, m_bins)
    };
    while m > 1 && confidence <= edge(m - 1, m_bins) {
        m -= 1;
    }
    while m < m_bins && confidence > edge(m, m_bins) {
        m += 1;
    }
    m
}

fn check(outcomes: &[ScoredOutcome]) -> Result<(), MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(o) = outcomes
        .iter()
        .find(|o| !(0.0..=1.0).contains(&o.confidence))
    {
        return Err(MetricsError::ConfidenceOutOfRange(o.confidence));
    }
    Ok(())
}

/// Per-bin counts and statistics. Empty bins report zero confidence and accuracy.
pub fn reliability_bins(outcomes: &[ScoredOutcome], m_bins: usize) -> Vec<ReliabilityBin> {
    let m_bins = m_bins.max(1);
    let mut count = vec![0usize; m_bins];
    let mut conf_sum = vec![0.0f64; m_bins];
    let mut hits = vec![0usize; m_bins];
    for o in outcomes {
        let b = bin_index(o.confidence, m_bins) - 1;
        count[b] += 1;
        conf_sum[b] += o.confidence;
        hits[b] += usize::from(o.correct);
    }
    (0..m_bins)
        .map(|b| {
            let n = count[b];
            let (mean_confidence, accuracy) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf_sum[b] / n as f64, hits[b] as f64 / n as f64)
            };
            ReliabilityBin {
                index: b + 1,
                lower: edge(b, m_bins),
                upper: edge(b + 1, m_bins),
                count: n,
                mean_confidence,
                accuracy,
            }
        })
        .collect()
}

fn ece_from_bins(bins: &[ReliabilityBin], n: usize) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * (b.accuracy - b.mean_confidence).abs())
        .sum()
}

/// Expected calibration error with `m_bins` equal-width bins.
pub fn ece(outcomes: &[ScoredOutcome], m_bins: usize) -> Result<f64, MetricsError> {
    check(outcomes)?;
    if m_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    Ok(ece_from_bins(&reliability_bins(outcomes, m_bins), outcomes.len()))
}

/// Mean squared error between confidence and the 0/1 outcome.
pub fn brier(outcomes: &[ScoredOutcome]) -> Result<f64, MetricsError> {
    check(outcomes)?;
    let sum: f64 = outcomes
        .iter()
        .map(|o| {
            let d = o.confidence - f64::from(u8::from(o.correct));
            d * d
        })
        .sum();
    Ok(sum / outcomes.len() as f64)
}

/// Mann-Whitney AUROC with tied pairs counted one half.
///
/// Returns `None` when either class is empty. Runs in `O(N log N)` by
/// assigning mid-ranks to tied scores. Outcomes are ranked by `log_odds` when
/// every outcome carries one, otherwise by `confidence`.
pub fn auroc(outcomes: &[ScoredOutcome]) -> Option<f64> {
    let n_pos = outcomes.iter().filter(|o| o.correct).count();
    let n_neg = outcomes.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let by_logit = outcomes.iter().all(|o| o.log_odds.is_some());
    let mut sorted: Vec<(f64, bool)> = outcomes
        .iter()
        .map(|o| {
            let key = if by_logit { o.log_odds.unwrap_or_default() } else { o.confidence };
            (key, o.correct)
        })
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j share the average rank
        let mid_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = sorted[i..j].iter().filter(|o| o.1).count();
        rank_sum_pos += mid_rank * pos_in_group as f64;
        i = j;
    }
    let u = rank_sum_pos - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

pub fn accuracy(outcomes: &[ScoredOutcome]) -> Result<f64, MetricsError> {
    check(outcomes)?;
    Ok(outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64)
}

pub fn full_report(
    outcomes: &[ScoredOutcome],
    m_bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    check(outcomes)?;
    if m_bins == 0 {
        return Err(MetricsError::ZeroBins);
    }
    let bins = reliability_bins(outcomes, m_bins);
    Ok(CalibrationReport {
        n: outcomes.len(),
        m_bins,
        ece: ece_from_bins(&bins, outcomes.len()),
        bins,
        brier: brier(outcomes)?,
        auroc: auroc(outcomes),
        accuracy: accuracy(outcomes)?,
        temperature: None,
        ece_ts: None,
    })
}

pub fn report_for_records(
    records: &[GenerationRecord],
    m_bins: usize,
) -> Result<CalibrationReport, MetricsError> {
    let outcomes: Vec<ScoredOutcome> = records.iter().map(ScoredOutcome::from).collect();
    full_report(&outcomes, m_bins)
}

pub fn write_reliability_csv(bins: &[ReliabilityBin], path: &Path) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_path(path)?;
    for b in bins {
        w.serialize(b)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_report_json(report: &CalibrationReport, path: &Path) -> Result<(), MetricsError> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, report)?;
    f.write_all(b"\n")?;
    Ok(())
}

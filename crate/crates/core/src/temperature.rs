//! Single-scalar temperature scaling of self-evaluation log-odds.
//!
//! The logit of a record is `z = logprob_yes - logprob_no`; scaling divides it
//! by `T` before the logistic. `T` is chosen by minimising the mean binary
//! negative log-likelihood over a held-out split: a 64-point log-spaced grid
//! over the bounds, then golden-section refinement around the best grid point.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError, ScoredOutcome};
use crate::numeric::{log_sigmoid, sigmoid};
use crate::record::GenerationRecord;

pub const DEFAULT_BOUNDS: (f64, f64) = (0.05, 10.0);
pub const DEFAULT_VAL_SIZE: usize = 500;
const GRID_POINTS: usize = 64;
const REFINE_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum TemperatureError {
    #[error("no validation records")]
    EmptyInput,
    #[error("logit and label lengths differ ({logits} vs {labels})")]
    DimensionMismatch { logits: usize, labels: usize },
    #[error("temperature must be > 0, got {0}")]
    NonPositiveTemperature(f64),
    #[error("invalid search bounds ({0}, {1})")]
    InvalidBounds(f64, f64),
    #[error("outcome has no logit to rescale")]
    MissingLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitWarning {
    /// The optimum sits on a search bound.
    BoundaryHit,
    /// Every logit has one sign and every label one value; the objective is
    /// monotone or flat and the returned bound carries no information.
    DegenerateInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll_before: f64,
    pub nll_after: f64,
    pub n_validation: usize,
    pub search_bounds: (f64, f64),
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<FitWarning>,
}

/// Mean binary NLL of labels under `σ(z / t)`.
pub fn nll(z: &[f64], o: &[bool], t: f64) -> Result<f64, TemperatureError> {
    if z.len() != o.len() {
        return Err(TemperatureError::DimensionMismatch {
            logits: z.len(),
            labels: o.len(),
        });
    }
    if z.is_empty() {
        return Err(TemperatureError::EmptyInput);
    }
    if !(t > 0.0) {
        return Err(TemperatureError::NonPositiveTemperature(t));
    }
    Ok(nll_unchecked(z, o, t))
}

fn nll_unchecked(z: &[f64], o: &[bool], t: f64) -> f64 {
    let sum: f64 = z
        .iter()
        .zip(o)
        .map(|(&zi, &oi)| {
            let s = zi / t;
            // log(1 - σ(s)) = log σ(-s)
            -if oi { log_sigmoid(s) } else { log_sigmoid(-s) }
        })
        .sum();
    sum / z.len() as f64
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == 0 {
                lo
            } else if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    (a + b) / 2.0
}

/// Fits `T` on raw logits and labels.
pub fn fit_temperature_logits(
    z: &[f64],
    o: &[bool],
    bounds: (f64, f64),
) -> Result<TemperatureFit, TemperatureError> {
    let (lo, hi) = bounds;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(TemperatureError::InvalidBounds(lo, hi));
    }
    let nll_before = nll(z, o, 1.0)?;
    let f = |t: f64| nll_unchecked(z, o, t);

    let grid = log_grid(lo, hi, GRID_POINTS);
    let values: Vec<f64> = grid.iter().map(|&t| f(t)).collect();
    let best = values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("grid is non-empty");

    let left = grid[best.saturating_sub(1)];
    let right = grid[(best + 1).min(GRID_POINTS - 1)];
    let refined = golden_section(f, left, right, REFINE_TOL);

    let mut candidates = vec![(grid[best], values[best]), (refined, f(refined))];
    if (lo..=hi).contains(&1.0) {
        candidates.push((1.0, nll_before));
    }
    let (temperature, nll_after) = candidates
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("candidates are non-empty");

    let mut warnings = Vec::new();
    let near = |x: f64, y: f64| (x - y).abs() <= REFINE_TOL * y.max(1.0);
    if near(temperature, lo) || near(temperature, hi) {
        warnings.push(FitWarning::BoundaryHit);
    }
    let all_nonneg = z.iter().all(|&v| v >= 0.0);
    let all_nonpos = z.iter().all(|&v| v <= 0.0);
    let one_label = o.iter().all(|&v| v == o[0]);
    if (all_nonneg || all_nonpos) && one_label {
        warnings.push(FitWarning::DegenerateInput);
    }

    Ok(TemperatureFit {
        temperature,
        nll_before,
        nll_after,
        n_validation: z.len(),
        search_bounds: bounds,
        warnings,
    })
}

fn logits_and_labels(records: &[GenerationRecord]) -> (Vec<f64>, Vec<bool>) {
    records.iter().map(|r| (r.log_odds(), r.correct)).unzip()
}

/// Fits `T` on every given record.
pub fn fit_temperature(
    records: &[GenerationRecord],
    bounds: (f64, f64),
) -> Result<TemperatureFit, TemperatureError> {
    if records.is_empty() {
        return Err(TemperatureError::EmptyInput);
    }
    let (z, o) = logits_and_labels(records);
    fit_temperature_logits(&z, &o, bounds)
}

/// Rescales each record to logit `z / t`. The yes/no logprobs become the
/// two-way log-probabilities `ln σ(±z/t)` and the confidence `σ(z / t)`, so a
/// scaled record still validates and keeps its rank order.
pub fn apply_temperature(
    records: &[GenerationRecord],
    t: f64,
) -> Result<Vec<GenerationRecord>, TemperatureError> {
    if !(t > 0.0) {
        return Err(TemperatureError::NonPositiveTemperature(t));
    }
    Ok(records
        .iter()
        .map(|r| {
            let s = r.log_odds() / t;
            GenerationRecord {
                logprob_yes: log_sigmoid(s),
                logprob_no: log_sigmoid(-s),
                confidence: Some(sigmoid(s)),
                ..r.clone()
            }
        })
        .collect())
}

/// Rescales outcomes that carry a logit: confidence `σ(z / t)`, logit `z / t`.
pub fn apply_temperature_outcomes(
    outcomes: &[ScoredOutcome],
    t: f64,
) -> Result<Vec<ScoredOutcome>, TemperatureError> {
    if !(t > 0.0) {
        return Err(TemperatureError::NonPositiveTemperature(t));
    }
    outcomes
        .iter()
        .map(|o| {
            o.log_odds
                .map(|z| ScoredOutcome::from_log_odds(z / t, o.correct))
                .ok_or(TemperatureError::MissingLogit)
        })
        .collect()
}

/// Temperature-scaled outcomes of records, ranked by their scaled logits.
pub fn scaled_outcomes(records: &[GenerationRecord], t: f64) -> Result<Vec<ScoredOutcome>, TemperatureError> {
    if !(t > 0.0) {
        return Err(TemperatureError::NonPositiveTemperature(t));
    }
    Ok(records
        .iter()
        .map(|r| ScoredOutcome::from_log_odds(r.log_odds() / t, r.correct))
        .collect())
}

/// Seeded uniform split without replacement: `(validation, remainder)`
/// index lists, each in ascending order.
pub fn validation_split(n: usize, val_size: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = val_size.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = index::sample(&mut rng, n, k).into_vec();
    val.sort_unstable();
    let mut in_val = vec![false; n];
    for &i in &val {
        in_val[i] = true;
    }
    let rest = (0..n).filter(|&i| !in_val[i]).collect();
    (val, rest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledEvaluation {
    pub fit: TemperatureFit,
    /// ECE of the temperature-scaled confidences on the evaluation split.
    pub ece_ts: f64,
    pub n_evaluated: usize,
}

/// Fits on a seeded validation split and reports ECE after scaling on the
/// remainder. When the run has no records left over after the split, the fit
/// and the report share the full set.
pub fn fit_and_evaluate(
    records: &[GenerationRecord],
    val_size: usize,
    seed: u64,
    bounds: (f64, f64),
    m_bins: usize,
) -> Result<ScaledEvaluation, FitEvalError> {
    if records.is_empty() {
        return Err(TemperatureError::EmptyInput.into());
    }
    let (val, rest) = validation_split(records.len(), val_size, seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let val_records = pick(&val);
    let eval_records = if rest.is_empty() {
        records.to_vec()
    } else {
        pick(&rest)
    };
    let fit = fit_temperature(&val_records, bounds)?;
    let outcomes = scaled_outcomes(&eval_records, fit.temperature)?;
    let ece_ts = metrics::ece(&outcomes, m_bins)?;
    Ok(ScaledEvaluation {
        fit,
        ece_ts,
        n_evaluated: eval_records.len(),
    })
}

#[derive(Debug, Error)]
pub enum FitEvalError {
    #[error(transparent)]
    Temperature(#[from] TemperatureError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

//! Verbalized confidence from a binary yes/no self-evaluation query.
//!
//! The confidence is the probability mass of the affirmative token
//! renormalised over `{yes, no}`. It is evaluated as the logistic of the
//! log-odds `logprob_yes - logprob_no` so that logprobs far below `-700`
//! neither underflow nor divide zero by zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::sigmoid;

#[derive(Debug, Error, PartialEq)]
pub enum ConfidenceError {
    #[error("non-finite logprob (yes = {yes}, no = {no})")]
    NonFiniteInput { yes: f64, no: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceQuery {
    pub logprob_yes: f64,
    pub logprob_no: f64,
}

impl ConfidenceQuery {
    pub fn new(logprob_yes: f64, logprob_no: f64) -> Self {
        Self {
            logprob_yes,
            logprob_no,
        }
    }
}

pub fn verbalized_confidence(q: ConfidenceQuery) -> Result<f64, ConfidenceError> {
    if !(q.logprob_yes.is_finite() && q.logprob_no.is_finite()) {
        return Err(ConfidenceError::NonFiniteInput {
            yes: q.logprob_yes,
            no: q.logprob_no,
        });
    }
    Ok(sigmoid(q.logprob_yes - q.logprob_no))
}

/// Versioned wording of the self-evaluation query. Placeholders:
/// `{question}`, `{path}`, `{answer}`.
pub const EVAL_TEMPLATE_VERSION: &str = "v1";
pub const DEFAULT_EVAL_TEMPLATE: &str = "Question: {question}\n\nProposed solution:\n{path}\n\nProposed answer: {answer}\n\nIs the answer correct? Answer yes or no.\nAnswer:";

/// Fills the self-evaluation template. Substitution is single-pass, so
/// placeholder-like text inside the inputs is left alone.
pub fn render_eval_prompt(template: &str, question: &str, path: &str, answer: &str) -> String {
    let mut out = String::with_capacity(template.len() + question.len() + path.len() + answer.len());
    let mut rest = template;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let hit = [("{question}", question), ("{path}", path), ("{answer}", answer)]
            .into_iter()
            .find(|(k, _)| tail.starts_with(k));
        match hit {
            Some((k, v)) => {
                out.push_str(v);
                rest = &tail[k.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

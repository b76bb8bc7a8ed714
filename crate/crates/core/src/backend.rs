//! Sources of sampled reasoning paths: a seeded synthetic oracle and a
//! client for OpenAI-compatible `/v1/completions` endpoints.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::aid::{repair_text, TextRepair, DEFAULT_MAX_BOX_CONTENT};
use crate::confidence::{render_eval_prompt, DEFAULT_EVAL_TEMPLATE};
use crate::extract::{extract_answer, extract_code, normalize_answer};
use crate::numeric::log_sigmoid;
use crate::record::{DomainTag, Problem};

const MAX_ATTEMPTS: u32 = 3;
const BODY_EXCERPT: usize = 200;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("environment variable {0} holding the API key is not set")]
    MissingApiKey(String),
    #[error("http status {status}: {body}")]
    HttpError { status: u16, body: String },
    #[error("endpoint returned no usable token logprobs: {0}")]
    LogprobsUnavailable(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("expected {expected} samples, got {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub n_samples: usize,
    pub decode_temperature: f64,
    /// Sample index of the first returned path; lets a resumed run continue
    /// a problem part-way through.
    #[serde(default)]
    pub first_sample_index: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub path_text: String,
    pub logprob_yes: f64,
    pub logprob_no: f64,
}

/// Something that can sample `n` reasoning paths for a problem and score each
/// with a yes/no self-evaluation query.
pub trait GenerationBackend: Sync {
    /// Identifies the generating model in run metadata.
    fn name(&self) -> String;

    /// Returns exactly `request.n_samples` responses, in sample order.
    fn generate(
        &self,
        problem: &Problem,
        request: &GenerationRequest,
    ) -> Result<Vec<GenerationResponse>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Oracle(OracleConfig),
    Http(HttpConfig),
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn GenerationBackend>, BackendError> {
        Ok(match self {
            BackendConfig::Oracle(c) => Box::new(OracleBackend::new(c.clone())?),
            BackendConfig::Http(c) => Box::new(HttpBackend::new(c.clone())?),
        })
    }
}

fn default_common_error_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Probability that a sample carries the gold answer.
    pub accuracy: f64,
    /// Separation of the self-evaluation log-odds between correct and
    /// incorrect samples, in units of the unit-variance noise.
    pub confidence_fidelity: f64,
    pub seed: u64,
    /// Probability that a wrong sample reuses the problem's shared wrong
    /// answer rather than a sample-specific one.
    #[serde(default = "default_common_error_rate")]
    pub common_error_rate: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            accuracy: 0.5,
            confidence_fidelity: 1.0,
            seed: 0,
            common_error_rate: default_common_error_rate(),
        }
    }
}

/// Deterministic synthetic generator. Every sample depends only on
/// `(seed, problem_id, sample_index)`.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    cfg: OracleConfig,
}

fn digest_seed(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let mut out = [0u8; 32];
    out.copy_from_slice(&h.finalize());
    out
}

impl OracleBackend {
    pub fn new(cfg: OracleConfig) -> Result<Self, BackendError> {
        if !(0.0..=1.0).contains(&cfg.accuracy) {
            return Err(BackendError::InvalidConfig(format!(
                "oracle accuracy {} outside [0, 1]",
                cfg.accuracy
            )));
        }
        if !(cfg.confidence_fidelity >= 0.0 && cfg.confidence_fidelity.is_finite()) {
            return Err(BackendError::InvalidConfig(format!(
                "oracle confidence_fidelity {} must be finite and >= 0",
                cfg.confidence_fidelity
            )));
        }
        if !(0.0..=1.0).contains(&cfg.common_error_rate) {
            return Err(BackendError::InvalidConfig(format!(
                "oracle common_error_rate {} outside [0, 1]",
                cfg.common_error_rate
            )));
        }
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    /// A wrong answer derived from the problem id. `variant = None` gives the
    /// answer shared by all samples of the problem.
    pub fn wrong_answer(problem: &Problem, variant: Option<u32>) -> String {
        let tag = variant.map_or([0u8; 5], |v| {
            let b = v.to_le_bytes();
            [1, b[0], b[1], b[2], b[3]]
        });
        let d = digest_seed(&[b"wrong", problem.id.as_bytes(), &tag]);
        let mut n = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) % 9000 + 1000;
        let gold = normalize_answer(&problem.gold_answer);
        loop {
            let s = n.to_string();
            if normalize_answer(&s) != gold {
                return s;
            }
            n += 1;
        }
    }

    /// `(correct, answer, log-odds)` for one sample.
    pub fn draw(&self, problem: &Problem, sample_index: u32) -> (bool, String, f64) {
        let seed = self.cfg.seed.to_le_bytes();
        let idx = sample_index.to_le_bytes();
        let mut rng =
            ChaCha8Rng::from_seed(digest_seed(&[b"sample", &seed, problem.id.as_bytes(), &idx]));
        let correct = rng.random::<f64>() < self.cfg.accuracy;
        let common = rng.random::<f64>() < self.cfg.common_error_rate;
        let noise: f64 = rng.sample(StandardNormal);
        let answer = if correct {
            problem.gold_answer.clone()
        } else if common {
            Self::wrong_answer(problem, None)
        } else {
            Self::wrong_answer(problem, Some(sample_index))
        };
        let sign = if correct { 1.0 } else { -1.0 };
        (correct, answer, self.cfg.confidence_fidelity * sign + noise)
    }

    fn render_path(problem: &Problem, sample_index: u32, answer: &str) -> String {
        match problem.domain_tag {
            DomainTag::Code => format!(
                "Sample {sample_index} for {}.\n```python\ndef solve():\n    return {answer}\n```\n",
                problem.id
            ),
            _ => format!(
                "Sample {sample_index} for {}.\nWorking through the problem step by step.\nSo, the answer is \\boxed{{{answer}}}",
                problem.id
            ),
        }
    }
}

impl GenerationBackend for OracleBackend {
    fn name(&self) -> String {
        let c = &self.cfg;
        format!(
            "oracle(seed={},accuracy={},fidelity={},common_error_rate={})",
            c.seed, c.accuracy, c.confidence_fidelity, c.common_error_rate
        )
    }

    fn generate(
        &self,
        problem: &Problem,
        request: &GenerationRequest,
    ) -> Result<Vec<GenerationResponse>, BackendError> {
        Ok((0..request.n_samples as u32)
            .map(|i| {
                let idx = request.first_sample_index + i;
                let (_, answer, z) = self.draw(problem, idx);
                GenerationResponse {
                    path_text: Self::render_path(problem, idx, &answer),
                    logprob_yes: log_sigmoid(z),
                    logprob_no: log_sigmoid(-z),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// One request; read both labels from the next-token `top_logprobs`.
    #[default]
    NextToken,
    /// Two echo requests scoring `prompt + " yes"` and `prompt + " no"`.
    ScoredContinuations,
}

fn d_api_key_env_var() -> String {
    "OPENAI_API_KEY".into()
}
fn d_decode_temperature() -> f64 {
    0.7
}
fn d_max_tokens() -> u32 {
    1024
}
fn d_timeout() -> f64 {
    60.0
}
fn d_max_in_flight() -> usize {
    4
}
fn d_top_logprobs() -> u32 {
    20
}
fn d_backoff_ms() -> u64 {
    500
}
fn d_eval_template() -> String {
    DEFAULT_EVAL_TEMPLATE.into()
}
fn d_yes() -> String {
    "yes".into()
}
fn d_no() -> String {
    "no".into()
}
fn d_repair_tokens() -> u32 {
    32
}
fn d_box_chars() -> usize {
    DEFAULT_MAX_BOX_CONTENT
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Server root, e.g. `http://localhost:8000`; `/v1/completions` is appended.
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "d_api_key_env_var")]
    pub api_key_env_var: String,
    #[serde(default = "d_decode_temperature")]
    pub decode_temperature: f64,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "d_timeout")]
    pub timeout_seconds: f64,
    #[serde(default = "d_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub confidence_mode: ConfidenceMode,
    #[serde(default = "d_top_logprobs")]
    pub top_logprobs: u32,
    #[serde(default = "d_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "d_eval_template")]
    pub eval_template: String,
    #[serde(default = "d_yes")]
    pub eval_yes_label: String,
    #[serde(default = "d_no")]
    pub eval_no_label: String,
    /// Token budget for the continuation that fills an injected box.
    #[serde(default = "d_repair_tokens")]
    pub repair_max_tokens: u32,
    #[serde(default = "d_box_chars")]
    pub max_box_content_chars: usize,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env_var: d_api_key_env_var(),
            decode_temperature: d_decode_temperature(),
            max_tokens: d_max_tokens(),
            timeout_seconds: d_timeout(),
            max_in_flight: d_max_in_flight(),
            confidence_mode: ConfidenceMode::default(),
            top_logprobs: d_top_logprobs(),
            initial_backoff_ms: d_backoff_ms(),
            eval_template: d_eval_template(),
            eval_yes_label: d_yes(),
            eval_no_label: d_no(),
            repair_max_tokens: d_repair_tokens(),
            max_box_content_chars: d_box_chars(),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: usize,
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Debug, Default, Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<HashMap<String, f64>>>>,
    #[serde(default)]
    text_offset: Vec<usize>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-mass of `label` in a top-logprobs table, pooling case and
/// leading/trailing whitespace variants (`"yes"`, `" Yes"`, ...).
fn label_mass(top: &HashMap<String, f64>, label: &str) -> Option<f64> {
    let want = label.trim();
    let hits: Vec<f64> = top
        .iter()
        .filter(|(tok, _)| tok.trim().eq_ignore_ascii_case(want))
        .map(|(_, &lp)| lp)
        .collect();
    (!hits.is_empty()).then(|| log_sum_exp(&hits).min(0.0))
}

/// `(logprob_yes, logprob_no)` from a next-token table. A label absent from
/// the table gets the smallest logprob present, an upper bound on its mass.
fn yes_no_from_top(
    top: &HashMap<String, f64>,
    yes: &str,
    no: &str,
) -> Result<(f64, f64), BackendError> {
    let floor = top.values().copied().fold(f64::INFINITY, f64::min).min(0.0);
    match (label_mass(top, yes), label_mass(top, no)) {
        (None, None) => Err(BackendError::LogprobsUnavailable(format!(
            "neither {yes:?} nor {no:?} among the top logprobs"
        ))),
        (y, n) => Ok((y.unwrap_or(floor), n.unwrap_or(floor))),
    }
}

/// Sum of token logprobs from character offset `from` onward.
fn continuation_logprob(lp: &ChoiceLogprobs, from: usize) -> Result<f64, BackendError> {
    if lp.text_offset.len() != lp.token_logprobs.len() || lp.text_offset.is_empty() {
        return Err(BackendError::LogprobsUnavailable(
            "echo response lacks aligned token_logprobs/text_offset".into(),
        ));
    }
    let mut total = 0.0;
    let mut seen = false;
    for (&off, &v) in lp.text_offset.iter().zip(&lp.token_logprobs) {
        if off >= from {
            total += v.ok_or_else(|| {
                BackendError::LogprobsUnavailable("null logprob on a scored token".into())
            })?;
            seen = true;
        }
    }
    if !seen {
        return Err(BackendError::LogprobsUnavailable(
            "no tokens past the prompt were scored".into(),
        ));
    }
    Ok(total.min(0.0))
}

fn excerpt(body: &str) -> String {
    let mut s: String = body.chars().take(BODY_EXCERPT).collect();
    if body.chars().count() > BODY_EXCERPT {
        s.push('…');
    }
    s
}

/// Client for an OpenAI-compatible completions server.
///
/// Paths without a closed `\boxed{}` are repaired post hoc: the answer
/// injection phrase is appended and the model is asked to continue up to the
/// closing brace. This approximates in-engine injection decoding.
pub struct HttpBackend {
    cfg: HttpConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    gate: Gate,
    retries: AtomicU64,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("cfg", &self.cfg)
            .field("api_key", &"<redacted>")
            .field("retries", &self.retries)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let api_key = std::env::var(&cfg.api_key_env_var)
            .map_err(|_| BackendError::MissingApiKey(cfg.api_key_env_var.clone()))?;
        if cfg.max_in_flight == 0 {
            return Err(BackendError::InvalidConfig("max_in_flight must be >= 1".into()));
        }
        if !(cfg.timeout_seconds > 0.0 && cfg.timeout_seconds.is_finite()) {
            return Err(BackendError::InvalidConfig("timeout_seconds must be > 0".into()));
        }
        if cfg.eval_yes_label.trim().eq_ignore_ascii_case(cfg.eval_no_label.trim()) {
            return Err(BackendError::InvalidConfig("yes and no labels coincide".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_seconds))
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            gate: Gate::new(cfg.max_in_flight),
            cfg,
            api_key,
            client,
            retries: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.cfg
    }

    /// Retries performed so far across all requests.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn url(&self) -> String {
        format!("{}/v1/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn post(&self, body: &Value) -> Result<CompletionResponse, BackendError> {
        let _permit = self.gate.acquire();
        let url = self.url();
        let mut delay = self.cfg.initial_backoff_ms;
        let mut attempt = 1;
        loop {
            let mut req = self.client.post(&url).json(body);
            if !self.api_key.is_empty() {
                req = req.bearer_auth(&self.api_key);
            }
            let err = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp
                        .text()
                        .map_err(|e| BackendError::Transport(e.to_string()))?;
                    if status.is_success() {
                        return serde_json::from_str(&text)
                            .map_err(|e| BackendError::MalformedResponse(e.to_string()));
                    }
                    let err = BackendError::HttpError {
                        status: status.as_u16(),
                        body: excerpt(&text),
                    };
                    if !status.is_server_error() {
                        return Err(err);
                    }
                    err
                }
                Err(e) if e.is_timeout() || e.is_connect() => {
                    BackendError::Transport(e.without_url().to_string())
                }
                Err(e) => return Err(BackendError::Transport(e.without_url().to_string())),
            };
            if attempt >= MAX_ATTEMPTS {
                return Err(err);
            }
            let total = self.retries.fetch_add(1, Ordering::Relaxed) + 1;
            log::warn!(
                "completions request failed ({err}); retry {attempt}/{} after {delay} ms (retries so far: {total})",
                MAX_ATTEMPTS - 1
            );
            std::thread::sleep(Duration::from_millis(delay));
            delay = delay.saturating_mul(2);
            attempt += 1;
        }
    }

    fn ensure_boxed(&self, prompt: &str, text: String) -> Result<String, BackendError> {
        match repair_text(&text, self.cfg.max_box_content_chars) {
            TextRepair::Unchanged => Ok(text),
            TextRepair::Closed(t) => {
                log::info!("closed an unterminated answer box");
                Ok(t)
            }
            TextRepair::NeedsContinuation(prefix) => {
                log::info!("no answer box; requesting an injected continuation");
                let body = json!({
                    "model": self.cfg.model_name,
                    "prompt": format!("{prompt}{prefix}"),
                    "n": 1,
                    "temperature": 0.0,
                    "max_tokens": self.cfg.repair_max_tokens,
                    "stop": ["}"],
                });
                let resp = self.post(&body)?;
                let cont = resp.choices.into_iter().next().map(|c| c.text).unwrap_or_default();
                let cont: String = cont
                    .split('}')
                    .next()
                    .unwrap_or("")
                    .chars()
                    .take(self.cfg.max_box_content_chars)
                    .collect();
                Ok(format!("{prefix}{cont}}}"))
            }
        }
    }

    fn confidence(&self, eval_prompt: &str) -> Result<(f64, f64), BackendError> {
        let (yes, no) = (&self.cfg.eval_yes_label, &self.cfg.eval_no_label);
        match self.cfg.confidence_mode {
            ConfidenceMode::NextToken => {
                let body = json!({
                    "model": self.cfg.model_name,
                    "prompt": eval_prompt,
                    "n": 1,
                    "temperature": 0.0,
                    "max_tokens": 1,
                    "logprobs": self.cfg.top_logprobs,
                });
                let resp = self.post(&body)?;
                let top = resp
                    .choices
                    .into_iter()
                    .next()
                    .and_then(|c| c.logprobs)
                    .and_then(|l| l.top_logprobs)
                    .and_then(|t| t.into_iter().next().flatten())
                    .ok_or_else(|| {
                        BackendError::LogprobsUnavailable("response has no top_logprobs".into())
                    })?;
                yes_no_from_top(&top, yes, no)
            }
            ConfidenceMode::ScoredContinuations => {
                let from = eval_prompt.chars().count();
                let score = |label: &str| -> Result<f64, BackendError> {
                    let body = json!({
                        "model": self.cfg.model_name,
                        "prompt": format!("{eval_prompt} {label}"),
                        "n": 1,
                        "temperature": 0.0,
                        "max_tokens": 0,
                        "echo": true,
                        "logprobs": 0,
                    });
                    let resp = self.post(&body)?;
                    let lp = resp
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.logprobs)
                        .ok_or_else(|| {
                            BackendError::LogprobsUnavailable("response has no logprobs".into())
                        })?;
                    continuation_logprob(&lp, from)
                };
                Ok((score(yes)?, score(no)?))
            }
        }
    }

    fn finish_sample(&self, problem: &Problem, prompt: &str, text: String) -> Result<GenerationResponse, BackendError> {
        let (path_text, answer) = match problem.domain_tag {
            DomainTag::Code => {
                let sig = problem.signature.as_deref().unwrap_or("");
                let code = extract_code(&text, sig).normalized;
                (text, code)
            }
            _ => {
                let t = self.ensure_boxed(prompt, text)?;
                let a = extract_answer(&t).raw_span;
                (t, a)
            }
        };
        let eval_prompt = render_eval_prompt(&self.cfg.eval_template, &problem.prompt, &path_text, &answer);
        let (logprob_yes, logprob_no) = self.confidence(&eval_prompt)?;
        Ok(GenerationResponse {
            path_text,
            logprob_yes,
            logprob_no,
        })
    }
}

impl GenerationBackend for HttpBackend {
    fn name(&self) -> String {
        format!("http:{}", self.cfg.model_name)
    }

    fn generate(
        &self,
        problem: &Problem,
        request: &GenerationRequest,
    ) -> Result<Vec<GenerationResponse>, BackendError> {
        if request.n_samples == 0 {
            return Ok(Vec::new());
        }
        let body = json!({
            "model": self.cfg.model_name,
            "prompt": request.prompt,
            "n": request.n_samples,
            "temperature": request.decode_temperature,
            "max_tokens": self.cfg.max_tokens,
            "logprobs": 1,
        });
        let mut choices = self.post(&body)?.choices;
        if choices.len() != request.n_samples {
            return Err(BackendError::CountMismatch {
                expected: request.n_samples,
                got: choices.len(),
            });
        }
        choices.sort_by_key(|c| c.index);
        std::thread::scope(|s| {
            let handles: Vec<_> = choices
                .into_iter()
                .map(|c| s.spawn(|| self.finish_sample(problem, &request.prompt, c.text)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("sample worker panicked"))
                .collect()
        })
    }
}

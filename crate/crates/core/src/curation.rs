//! Dual-task training-set construction from sampled paths.
//!
//! Each iteration samples `K` paths per problem, labels every path for the
//! self-evaluation task (`yes` if correct, `no` otherwise), keeps correct
//! paths for the reasoning task, shuffles both pools together and exports the
//! result as SFT-ready JSONL.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationBackend, GenerationRequest, GenerationResponse};
use crate::confidence::{
    render_eval_prompt, verbalized_confidence, ConfidenceQuery, DEFAULT_EVAL_TEMPLATE,
    EVAL_TEMPLATE_VERSION,
};
use crate::extract::{extract_answer, extract_code, normalize_answer};
use crate::record::{
    self, DomainTag, GenerationRecord, Problem, RecordError, RunFile, RunMetadata,
};

pub const RUN_FILE: &str = "run.jsonl";
pub const RESUME_MARKER: &str = "resume_marker.json";
pub const SFT_FILE: &str = "sft_total.jsonl";
pub const REPORT_FILE: &str = "curation_report.json";

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid curation config: {0}")]
    InvalidConfig(String),
    #[error("backend failed on problem {problem_id:?} sample {sample_index}: {source}")]
    Backend {
        problem_id: String,
        sample_index: u32,
        #[source]
        source: BackendError,
        /// Records completed before the failure, in canonical order.
        partial: Vec<GenerationRecord>,
    },
    #[error("no verdict for code sample {problem_id:?}/{sample_index}")]
    MissingVerdict { problem_id: String, sample_index: u32 },
    #[error("resume data does not match the problem set: {0}")]
    ResumeMismatch(String),
    #[error("non-finite self-evaluation logprobs for {problem_id:?}/{sample_index}")]
    BadLogprobs { problem_id: String, sample_index: u32 },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CurationError + '_ {
    move |source| CurationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    /// `{prompt, completion, task, label?}` per line.
    #[default]
    PromptCompletion,
    /// `{messages: [user, assistant], task, label?}` per line.
    Chat,
}

fn d_temp() -> f64 {
    0.7
}
fn d_yes() -> String {
    "yes".into()
}
fn d_no() -> String {
    "no".into()
}
fn d_template() -> String {
    DEFAULT_EVAL_TEMPLATE.into()
}
fn d_template_version() -> String {
    EVAL_TEMPLATE_VERSION.into()
}
fn d_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationConfig {
    pub k: u32,
    pub iterations: u32,
    pub seed: u64,
    #[serde(default = "d_temp")]
    pub decode_temperature: f64,
    #[serde(default = "d_yes")]
    pub eval_yes_label: String,
    #[serde(default = "d_no")]
    pub eval_no_label: String,
    #[serde(default = "d_template")]
    pub eval_template: String,
    #[serde(default = "d_template_version")]
    pub eval_template_version: String,
    /// Adds hint-conditioned reasoning paths for problems with no correct
    /// sample. Only meant for reproducing the STaR baseline.
    #[serde(default)]
    pub rationalization: bool,
    #[serde(default = "d_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub format: ExportFormat,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            k: 1,
            iterations: 1,
            seed: 0,
            decode_temperature: d_temp(),
            eval_yes_label: d_yes(),
            eval_no_label: d_no(),
            eval_template: d_template(),
            eval_template_version: d_template_version(),
            rationalization: false,
            max_in_flight: d_in_flight(),
            format: ExportFormat::default(),
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<(), CurationError> {
        let bad = |m: &str| Err(CurationError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("K must be >= 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be >= 1");
        }
        if !(self.decode_temperature >= 0.0 && self.decode_temperature.is_finite()) {
            return bad("decode_temperature must be finite and >= 0");
        }
        if self.eval_yes_label.is_empty() || self.eval_no_label.is_empty() {
            return bad("eval labels must be non-empty");
        }
        if self.eval_yes_label == self.eval_no_label {
            return bad("eval labels must differ");
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SftTask {
    Reasoning,
    SelfEvaluation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalLabel {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SftExample {
    pub task: SftTask,
    pub prompt: String,
    pub target: String,
    pub source_problem_id: String,
    pub source_sample_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<EvalLabel>,
}

/// Correctness of extracted code, supplied from outside (sandboxed execution
/// is not done here).
pub trait CodeChecker: Sync {
    fn verdict(&self, problem: &Problem, sample_index: u32, code: &str) -> Option<bool>;
}

#[derive(Debug, Clone, Deserialize)]
struct VerdictLine {
    problem_id: String,
    sample_index: u32,
    passed: bool,
}

/// Verdicts read from JSONL lines `{"problem_id", "sample_index", "passed"}`.
#[derive(Debug, Clone, Default)]
pub struct VerdictFile {
    verdicts: HashMap<(String, u32), bool>,
}

impl VerdictFile {
    pub fn load(path: &Path) -> Result<Self, CurationError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut verdicts = HashMap::new();
        let mut offset = 0;
        for (i, line) in text.split_inclusive('\n').enumerate() {
            if !line.trim().is_empty() {
                let v: VerdictLine = serde_json::from_str(line.trim_end()).map_err(|e| {
                    RecordError::Parse {
                        line: i + 1,
                        byte_offset: offset + e.column().saturating_sub(1),
                        message: e.to_string(),
                    }
                })?;
                verdicts.insert((v.problem_id, v.sample_index), v.passed);
            }
            offset += line.len();
        }
        Ok(Self { verdicts })
    }

    pub fn insert(&mut self, problem_id: &str, sample_index: u32, passed: bool) {
        self.verdicts.insert((problem_id.to_string(), sample_index), passed);
    }
}

impl CodeChecker for VerdictFile {
    fn verdict(&self, problem: &Problem, sample_index: u32, _code: &str) -> Option<bool> {
        self.verdicts.get(&(problem.id.clone(), sample_index)).copied()
    }
}

/// Builds the record for one sampled path: extraction, correctness and confidence.
pub fn score_response(
    problem: &Problem,
    sample_index: u32,
    response: GenerationResponse,
    checker: Option<&dyn CodeChecker>,
) -> Result<GenerationRecord, CurationError> {
    let (raw_answer, answer, correct) = match problem.domain_tag {
        DomainTag::Code => {
            let sig = problem.signature.as_deref().unwrap_or("");
            let e = extract_code(&response.path_text, sig);
            let verdict = checker
                .and_then(|c| c.verdict(problem, sample_index, &e.normalized))
                .ok_or_else(|| CurationError::MissingVerdict {
                    problem_id: problem.id.clone(),
                    sample_index,
                })?;
            (e.raw_span, e.normalized, verdict)
        }
        DomainTag::Math | DomainTag::Other => {
            let e = extract_answer(&response.path_text);
            let correct = e.complete
                && !e.normalized.is_empty()
                && e.normalized == normalize_answer(&problem.gold_answer);
            (e.raw_span, e.normalized, correct)
        }
    };
    let confidence = verbalized_confidence(ConfidenceQuery::new(
        response.logprob_yes,
        response.logprob_no,
    ))
    .map_err(|_| CurationError::BadLogprobs {
        problem_id: problem.id.clone(),
        sample_index,
    })?;
    Ok(GenerationRecord {
        problem_id: problem.id.clone(),
        sample_index,
        path: response.path_text,
        raw_answer,
        answer,
        correct,
        logprob_yes: response.logprob_yes,
        logprob_no: response.logprob_no,
        confidence: Some(confidence),
    })
}

/// Checks that `prior` is a canonical prefix (problem order × sample index)
/// and returns, per problem, how many samples it already holds.
fn resume_counts(
    problems: &[Problem],
    k: u32,
    prior: &[GenerationRecord],
) -> Result<Vec<u32>, CurationError> {
    let mut counts = vec![0u32; problems.len()];
    let mut it = prior.iter();
    'outer: for (pi, p) in problems.iter().enumerate() {
        for s in 0..k {
            match it.next() {
                None => break 'outer,
                Some(r) if r.problem_id == p.id && r.sample_index == s => counts[pi] += 1,
                Some(r) => {
                    return Err(CurationError::ResumeMismatch(format!(
                        "expected {}/{s}, found {}/{}",
                        p.id, r.problem_id, r.sample_index
                    )))
                }
            }
        }
    }
    if let Some(r) = it.next() {
        return Err(CurationError::ResumeMismatch(format!(
            "extra record {}/{} beyond N x K",
            r.problem_id, r.sample_index
        )));
    }
    Ok(counts)
}

/// Samples `K` paths per problem and scores them.
///
/// `prior` holds records already produced by an interrupted run; they are kept
/// as-is and only the missing samples are requested. Up to `max_in_flight`
/// problems are in flight at once, but the result is always in canonical order.
/// On failure the error carries every record that precedes the failing
/// problem in canonical order.
pub fn generation_phase(
    problems: &[Problem],
    backend: &dyn GenerationBackend,
    config: &CurationConfig,
    checker: Option<&dyn CodeChecker>,
    prior: &[GenerationRecord],
) -> Result<Vec<GenerationRecord>, CurationError> {
    config.validate()?;
    let done = resume_counts(problems, config.k, prior)?;
    let n = problems.len();
    let slots: Vec<Mutex<Option<Result<Vec<GenerationRecord>, CurationError>>>> =
        (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let workers = config.max_in_flight.min(n).max(1);

    let work = |pi: usize| -> Result<Vec<GenerationRecord>, CurationError> {
        let p = &problems[pi];
        let first = done[pi];
        let request = GenerationRequest {
            prompt: p.prompt.clone(),
            n_samples: (config.k - first) as usize,
            decode_temperature: config.decode_temperature,
            first_sample_index: first,
        };
        let fail = |source| CurationError::Backend {
            problem_id: p.id.clone(),
            sample_index: first,
            source,
            partial: Vec::new(),
        };
        let responses = backend.generate(p, &request).map_err(fail)?;
        if responses.len() != request.n_samples {
            return Err(fail(BackendError::CountMismatch {
                expected: request.n_samples,
                got: responses.len(),
            }));
        }
        responses
            .into_iter()
            .zip(first..)
            .map(|(resp, idx)| score_response(p, idx, resp, checker))
            .collect()
    };

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let pi = next.fetch_add(1, Ordering::SeqCst);
                if pi >= n {
                    break;
                }
                if done[pi] == config.k {
                    continue;
                }
                let r = work(pi);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[pi].lock().expect("slot lock") = Some(r);
            });
        }
    });

    let mut out: Vec<GenerationRecord> = Vec::with_capacity(n * config.k as usize);
    let mut prior_iter = prior.iter();
    for (pi, slot) in slots.into_iter().enumerate() {
        out.extend(prior_iter.by_ref().take(done[pi] as usize).cloned());
        if done[pi] == config.k {
            continue;
        }
        match slot.into_inner().expect("slot lock") {
            Some(Ok(recs)) => out.extend(recs),
            Some(Err(CurationError::Backend {
                problem_id,
                sample_index,
                source,
                ..
            })) => {
                return Err(CurationError::Backend {
                    problem_id,
                    sample_index,
                    source,
                    partial: out,
                })
            }
            Some(Err(e)) => return Err(e),
            // Work is claimed in index order, so unclaimed slots only follow a failure.
            None => unreachable!("slot {pi} unclaimed without an earlier failure"),
        }
    }
    Ok(out)
}

fn eval_example(problem: &Problem, r: &GenerationRecord, config: &CurationConfig) -> SftExample {
    let label = if r.correct { EvalLabel::Yes } else { EvalLabel::No };
    let target = match label {
        EvalLabel::Yes => &config.eval_yes_label,
        EvalLabel::No => &config.eval_no_label,
    };
    SftExample {
        task: SftTask::SelfEvaluation,
        prompt: render_eval_prompt(&config.eval_template, &problem.prompt, &r.path, &r.raw_answer),
        target: target.clone(),
        source_problem_id: r.problem_id.clone(),
        source_sample_index: r.sample_index,
        label: Some(label),
    }
}

/// Splits records into the reasoning pool (correct paths only) and the
/// self-evaluation pool (every path, labelled).
pub fn label_phase(
    records: &[GenerationRecord],
    problems: &[Problem],
    config: &CurationConfig,
) -> Result<(Vec<SftExample>, Vec<SftExample>), CurationError> {
    let by_id: HashMap<&str, &Problem> = problems.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut d_reason = Vec::new();
    let mut d_eval = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let p = by_id.get(r.problem_id.as_str()).ok_or_else(|| RecordError::InvariantViolation {
            index: i,
            message: format!("unknown problem id {:?}", r.problem_id),
        })?;
        if r.correct {
            d_reason.push(SftExample {
                task: SftTask::Reasoning,
                prompt: p.prompt.clone(),
                target: r.path.clone(),
                source_problem_id: r.problem_id.clone(),
                source_sample_index: r.sample_index,
                label: None,
            });
        }
        d_eval.push(eval_example(p, r, config));
    }
    Ok((d_reason, d_eval))
}

/// Concatenates both pools and applies a seeded Fisher–Yates shuffle.
pub fn mixing_phase(d_reason: &[SftExample], d_eval: &[SftExample], seed: u64) -> Vec<SftExample> {
    let mut all: Vec<SftExample> = d_reason.iter().chain(d_eval).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    all
}

#[derive(Serialize)]
struct PromptCompletionLine<'a> {
    prompt: &'a str,
    completion: &'a str,
    task: SftTask,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<EvalLabel>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatLine<'a> {
    messages: [ChatMessage<'a>; 2],
    task: SftTask,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<EvalLabel>,
}

pub fn export_sft(examples: &[SftExample], path: &Path, format: ExportFormat) -> Result<(), CurationError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let io = io_err(path);
    for e in examples {
        let line = match format {
            ExportFormat::PromptCompletion => serde_json::to_string(&PromptCompletionLine {
                prompt: &e.prompt,
                completion: &e.target,
                task: e.task,
                label: e.label,
            }),
            ExportFormat::Chat => serde_json::to_string(&ChatLine {
                messages: [
                    ChatMessage { role: "user", content: &e.prompt },
                    ChatMessage { role: "assistant", content: &e.target },
                ],
                task: e.task,
                label: e.label,
            }),
        }
        .expect("sft line serialises");
        w.write_all(line.as_bytes()).map_err(&io)?;
        w.write_all(b"\n").map_err(&io)?;
    }
    w.flush().map_err(io)
}

/// Hint-conditioned regeneration for problems without any correct sample.
/// Successful paths become reasoning examples under the original prompt.
pub fn rationalize(
    problems: &[Problem],
    records: &[GenerationRecord],
    backend: &dyn GenerationBackend,
    config: &CurationConfig,
    checker: Option<&dyn CodeChecker>,
) -> Result<Vec<SftExample>, CurationError> {
    let mut solved: HashMap<&str, bool> = HashMap::new();
    for r in records {
        *solved.entry(r.problem_id.as_str()).or_default() |= r.correct;
    }
    let mut out = Vec::new();
    for p in problems {
        if solved.get(p.id.as_str()).copied().unwrap_or(false) {
            continue;
        }
        let hinted = Problem {
            prompt: format!("{}\n(Hint: the answer is {}.)", p.prompt, p.gold_answer),
            ..p.clone()
        };
        let request = GenerationRequest {
            prompt: hinted.prompt.clone(),
            n_samples: 1,
            decode_temperature: config.decode_temperature,
            first_sample_index: config.k,
        };
        let resp = backend
            .generate(&hinted, &request)
            .map_err(|source| CurationError::Backend {
                problem_id: p.id.clone(),
                sample_index: config.k,
                source,
                partial: Vec::new(),
            })?;
        for (resp, idx) in resp.into_iter().zip(config.k..) {
            let r = score_response(p, idx, resp, checker)?;
            if r.correct {
                out.push(SftExample {
                    task: SftTask::Reasoning,
                    prompt: p.prompt.clone(),
                    target: r.path,
                    source_problem_id: p.id.clone(),
                    source_sample_index: idx,
                    label: None,
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationCounts {
    pub iteration: u32,
    pub generator: String,
    pub n_problems: usize,
    pub n_samples: usize,
    pub n_correct: usize,
    pub n_reason: usize,
    pub n_eval_yes: usize,
    pub n_eval_no: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub n_rationalized: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

impl IterationCounts {
    /// `n_eval_yes + n_eval_no = n_samples` and `n_reason = n_eval_yes = n_correct`.
    pub fn check(&self) -> Result<(), String> {
        if self.n_eval_yes + self.n_eval_no != self.n_samples {
            return Err(format!(
                "iteration {}: {} yes + {} no != {} samples",
                self.iteration, self.n_eval_yes, self.n_eval_no, self.n_samples
            ));
        }
        if self.n_reason != self.n_eval_yes || self.n_eval_yes != self.n_correct {
            return Err(format!(
                "iteration {}: reason {} / yes {} / correct {} disagree",
                self.iteration, self.n_reason, self.n_eval_yes, self.n_correct
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub iterations: Vec<IterationCounts>,
    pub mixing_seed: u64,
    pub eval_template_version: String,
}

/// Everything one iteration produced.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub records: Vec<GenerationRecord>,
    pub d_reason: Vec<SftExample>,
    pub d_eval: Vec<SftExample>,
    pub mixed: Vec<SftExample>,
    pub counts: IterationCounts,
}

pub fn count(
    iteration: u32,
    generator: String,
    n_problems: usize,
    records: &[GenerationRecord],
    d_reason: &[SftExample],
    d_eval: &[SftExample],
) -> IterationCounts {
    let yes = d_eval.iter().filter(|e| e.label == Some(EvalLabel::Yes)).count();
    IterationCounts {
        iteration,
        generator,
        n_problems,
        n_samples: records.len(),
        n_correct: records.iter().filter(|r| r.correct).count(),
        n_reason: d_reason.len(),
        n_eval_yes: yes,
        n_eval_no: d_eval.len() - yes,
        n_rationalized: 0,
    }
}

/// Label, mix and count one iteration's records in memory.
pub fn curate_records(
    iteration: u32,
    generator: String,
    problems: &[Problem],
    records: Vec<GenerationRecord>,
    config: &CurationConfig,
) -> Result<IterationOutput, CurationError> {
    let (d_reason, d_eval) = label_phase(&records, problems, config)?;
    let mixed = mixing_phase(&d_reason, &d_eval, config.seed);
    let counts = count(iteration, generator, problems.len(), &records, &d_reason, &d_eval);
    Ok(IterationOutput {
        records,
        d_reason,
        d_eval,
        mixed,
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeMarker {
    pub completed_records: usize,
    pub problem_id: String,
    pub sample_index: u32,
    pub error: String,
}

/// `created_at` for new run files: `SOURCE_DATE_EPOCH` when set, so that
/// reruns are byte-identical, otherwise the wall clock.
pub fn creation_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok());
    let t = match secs {
        Some(s) => chrono::DateTime::from_timestamp(s, 0).unwrap_or_default(),
        None => chrono::Utc::now(),
    };
    t.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

pub fn iteration_dir(out_dir: &Path, iteration: u32) -> PathBuf {
    out_dir.join(format!("iter_{iteration}"))
}

/// Runs all iterations, writing per-iteration `run.jsonl` and
/// `sft_total.jsonl` under `iter_<t>/`, the last iteration's
/// `sft_total.jsonl` and the `curation_report.json` at the top of `out_dir`.
///
/// `backend_for` supplies the generator of iteration `t`, i.e. the model
/// trained at the end of iteration `t - 1`. With `resume`, an interrupted
/// iteration continues from its partial run file.
pub fn run_curation<'b>(
    problems: &[Problem],
    backend_for: &mut dyn FnMut(u32) -> Result<Box<dyn GenerationBackend + 'b>, BackendError>,
    config: &CurationConfig,
    checker: Option<&dyn CodeChecker>,
    out_dir: &Path,
    resume: bool,
) -> Result<CurationReport, CurationError> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut report = CurationReport {
        iterations: Vec::new(),
        mixing_seed: config.seed,
        eval_template_version: config.eval_template_version.clone(),
    };
    let mut last_mixed = Vec::new();
    for t in 1..=config.iterations {
        let backend = backend_for(t).map_err(|source| CurationError::Backend {
            problem_id: String::new(),
            sample_index: 0,
            source,
            partial: Vec::new(),
        })?;
        let dir = iteration_dir(out_dir, t);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let run_path = dir.join(RUN_FILE);
        let marker_path = dir.join(RESUME_MARKER);

        let (metadata, prior) = if resume && run_path.exists() {
            let run = record::load_run(&run_path)?;
            (run.metadata, run.records)
        } else {
            let meta = RunMetadata {
                model_name: backend.name(),
                decode_temperature: config.decode_temperature,
                k: config.k,
                created_at: creation_timestamp(),
                iteration: Some(t),
                generator: Some(backend.name()),
            };
            (meta, Vec::new())
        };
        if metadata.generator.as_deref() != Some(backend.name().as_str()) {
            return Err(CurationError::ResumeMismatch(format!(
                "iteration {t} was generated by {:?}, not {:?}",
                metadata.generator,
                backend.name()
            )));
        }

        let records = match generation_phase(problems, backend.as_ref(), config, checker, &prior) {
            Ok(r) => r,
            Err(CurationError::Backend {
                problem_id,
                sample_index,
                source,
                partial,
            }) => {
                record::save_run(
                    &RunFile {
                        metadata: metadata.clone(),
                        records: partial.clone(),
                    },
                    &run_path,
                )?;
                let marker = ResumeMarker {
                    completed_records: partial.len(),
                    problem_id: problem_id.clone(),
                    sample_index,
                    error: source.to_string(),
                };
                write_json(&marker_path, &marker)?;
                return Err(CurationError::Backend {
                    problem_id,
                    sample_index,
                    source,
                    partial,
                });
            }
            Err(e) => return Err(e),
        };
        record::save_run(
            &RunFile {
                metadata: metadata.clone(),
                records: records.clone(),
            },
            &run_path,
        )?;
        if marker_path.exists() {
            fs::remove_file(&marker_path).map_err(io_err(&marker_path))?;
        }

        let mut out = curate_records(t, backend.name(), problems, records, config)?;
        if config.rationalization {
            let extra = rationalize(problems, &out.records, backend.as_ref(), config, checker)?;
            out.counts.n_rationalized = extra.len();
            let mut reason = out.d_reason.clone();
            reason.extend(extra);
            out.mixed = mixing_phase(&reason, &out.d_eval, config.seed);
        }
        export_sft(&out.mixed, &dir.join(SFT_FILE), config.format)?;
        report.iterations.push(out.counts);
        last_mixed = out.mixed;
    }
    export_sft(&last_mixed, &out_dir.join(SFT_FILE), config.format)?;
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CurationError> {
    let s = serde_json::to_string_pretty(value).expect("value serialises");
    fs::write(path, s + "\n").map_err(io_err(path))
}

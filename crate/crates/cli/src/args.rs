use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "calibra",
    version,
    about = "Calibration metrics, SC/CISC ensembling, self-evaluation data curation, answer-format decoding and weight merging",
    args_override_self = true
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct GlobalArgs {
    /// Seed for every random choice (splits, shuffles, the oracle backend).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Key-value file with flag defaults; explicit flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(untagged)]
pub enum Command {
    /// Generate, self-label and mix a dual-task fine-tuning set.
    Curate(CurateArgs),
    /// Calibration report and reliability table for a run file.
    Evaluate(EvaluateArgs),
    /// SC/CISC accuracy and calibration across ensemble sizes.
    Ensemble(EnsembleArgs),
    /// Fit a temperature on a validation split of a run file.
    TsFit(TsFitArgs),
    /// Interpolate two weight maps at one lambda.
    Merge(MergeArgs),
    /// Interpolate two weight maps over a lambda grid.
    Sweep(SweepArgs),
    /// Classify result rows into accuracy/ECE zones against a baseline.
    Pareto(ParetoArgs),
    /// Replay proposed tokens through the answer-format state machine.
    AidTrace(AidTraceArgs),
    /// Extract the final answer from text on stdin.
    Extract(ExtractArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Curate(_) => "curate",
            Command::Evaluate(_) => "evaluate",
            Command::Ensemble(_) => "ensemble",
            Command::TsFit(_) => "ts-fit",
            Command::Merge(_) => "merge",
            Command::Sweep(_) => "sweep",
            Command::Pareto(_) => "pareto",
            Command::AidTrace(_) => "aid-trace",
            Command::Extract(_) => "extract",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    Oracle,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceModeArg {
    NextToken,
    ScoredContinuations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    PromptCompletion,
    Chat,
}

#[derive(Debug, Args, Serialize)]
pub struct CurateArgs {
    /// Problems as JSONL: {id, prompt, gold_answer, domain_tag}.
    #[arg(long)]
    pub problems: PathBuf,
    /// Samples per problem.
    #[arg(long, default_value_t = 1)]
    pub k: u32,
    #[arg(long, default_value_t = 1)]
    pub iterations: u32,
    #[arg(long, value_enum, default_value_t = BackendKind::Oracle)]
    pub backend: BackendKind,
    /// Oracle: probability that a sample is correct.
    #[arg(long, default_value_t = 0.5)]
    pub oracle_accuracy: f64,
    /// Oracle: separation of self-evaluation log-odds between correct and wrong samples.
    #[arg(long, default_value_t = 1.0)]
    pub oracle_fidelity: f64,
    /// Oracle: probability that a wrong sample repeats the problem's common wrong answer.
    #[arg(long, default_value_t = 0.5)]
    pub oracle_common_error_rate: f64,
    /// Http: server root, e.g. http://localhost:8000.
    #[arg(long)]
    pub base_url: Option<String>,
    /// Http: model name; `{t}` is replaced by the iteration number.
    #[arg(long)]
    pub model: Option<String>,
    /// Http: environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    pub api_key_env: String,
    #[arg(long, value_enum, default_value_t = ConfidenceModeArg::NextToken)]
    pub confidence_mode: ConfidenceModeArg,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Http: per-request timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 0.7)]
    pub decode_temperature: f64,
    /// Add hint-conditioned paths for unsolved problems (STaR baseline only).
    #[arg(long)]
    pub rationalization: bool,
    #[arg(long, value_enum, default_value_t = FormatArg::PromptCompletion)]
    pub format: FormatArg,
    /// Code-problem verdicts as JSONL: {problem_id, sample_index, passed}.
    #[arg(long)]
    pub verdicts: Option<PathBuf>,
    /// Continue an interrupted run from its partial run file.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TsArgs {
    /// Validation split size for the temperature fit.
    #[arg(long, default_value_t = 500)]
    pub val_size: usize,
    /// Temperature search bounds as `lo,hi`.
    #[arg(long, default_value = "0.05,10", value_parser = parse_bounds)]
    pub ts_bounds: (f64, f64),
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Run file (JSONL with a leading metadata line).
    #[arg(long)]
    pub run: PathBuf,
    /// Problem file; enables the dangling-id check.
    #[arg(long)]
    pub problems: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Also fit a temperature and report ECE after scaling.
    #[arg(long)]
    pub ts: bool,
    #[command(flatten)]
    pub ts_args: TsArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct TsFitArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[command(flatten)]
    pub ts_args: TsArgs,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Write the scaled run file `run_ts.jsonl`.
    #[arg(long)]
    pub apply: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Sc,
    Cisc,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Problem file supplying the gold answers.
    #[arg(long)]
    pub gold: PathBuf,
    /// Ensemble sizes; defaults to 1, 10, 30 capped at the sampled K.
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
    /// CISC softmax temperature; tuned on a validation split when absent.
    #[arg(long)]
    pub softmax_t: Option<f64>,
    /// Number of problems in the tuning split.
    #[arg(long, default_value_t = 500)]
    pub tune_size: usize,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub tuned: PathBuf,
    #[arg(long)]
    pub lambda: f64,
    /// Verify that lambda 0 and 1 reproduce the inputs bit for bit.
    #[arg(long)]
    pub check_endpoints: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub tuned: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8,1")]
    pub grid: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ParetoArgs {
    /// CSV with at least method, accuracy and ece columns.
    #[arg(long)]
    pub results: PathBuf,
    /// Keep only rows whose model column matches.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, default_value = "Base Model")]
    pub baseline: String,
}

#[derive(Debug, Args, Serialize)]
pub struct AidTraceArgs {
    /// Proposed token ids, separated by whitespace or commas; `#` starts a comment.
    #[arg(long)]
    pub tokens: PathBuf,
    #[arg(long, default_value_t = 400)]
    pub max_len: usize,
    /// Defaults to min(150, max_len - 1).
    #[arg(long)]
    pub soft_margin: Option<usize>,
    #[arg(long, default_value_t = 40)]
    pub max_box_content: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExtractMode {
    Answer,
    Boxed,
    Code,
}

#[derive(Debug, Args, Serialize)]
pub struct ExtractArgs {
    #[arg(long, value_enum, default_value_t = ExtractMode::Answer)]
    pub mode: ExtractMode,
    /// Function signature to inject in code mode.
    #[arg(long, default_value = "")]
    pub signature: String,
}

fn parse_bounds(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected lo,hi, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    let (lo, hi) = (p(lo)?, p(hi)?);
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(format!("bounds must satisfy 0 < lo < hi, got ({lo}, {hi})"));
    }
    Ok((lo, hi))
}

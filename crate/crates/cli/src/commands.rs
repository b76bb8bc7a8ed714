use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use calibra::aid::{self, ToyVocab, TokenId};
use calibra::backend::ConfidenceMode;
use calibra::curation::{self, ExportFormat, VerdictFile};
use calibra::ensemble::{self, AggregationMode, DEFAULT_SOFTMAX_GRID};
use calibra::extract;
use calibra::merge;
use calibra::metrics;
use calibra::record::{self, validate_run};
use calibra::temperature;
use calibra::{
    BackendError, CodeChecker, CurationConfig, DomainTag, GenerationBackend,
    HttpBackend, HttpConfig, OracleBackend, OracleConfig, Problem, RunFile,
};
use serde::Serialize;
use serde_json::json;

use crate::args::*;
use crate::error::{CliError, CliResult};

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("output types serialise");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn load_nonempty_run(path: &Path) -> CliResult<RunFile> {
    let run = record::load_run(path)?;
    if run.records.is_empty() {
        return Err(CliError::input(format!("run file {} has no records", path.display())));
    }
    Ok(run)
}

/// Runs the structural checks; without a problem file the ids are taken
/// from the records themselves.
fn check_run(run: &RunFile, problems: Option<&[Problem]>) -> CliResult<()> {
    let owned;
    let problems = match problems {
        Some(p) => p,
        None => {
            let mut ids: Vec<&str> = run.records.iter().map(|r| r.problem_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            owned = ids
                .into_iter()
                .map(|id| Problem {
                    id: id.to_string(),
                    prompt: String::new(),
                    gold_answer: String::new(),
                    domain_tag: DomainTag::Other,
                    signature: None,
                })
                .collect::<Vec<_>>();
            &owned
        }
    };
    let violations = validate_run(run, problems);
    if violations.is_empty() {
        return Ok(());
    }
    let shown: Vec<_> = violations.iter().take(20).collect();
    Err(CliError::input(format!("run file has {} invariant violations", violations.len()))
        .with(json!({ "violations": shown, "total": violations.len() })))
}

pub fn curate(g: &GlobalArgs, a: &CurateArgs) -> CliResult<()> {
    let problems = record::load_problems(&a.problems)?;
    let config = CurationConfig {
        k: a.k,
        iterations: a.iterations,
        seed: g.seed,
        decode_temperature: a.decode_temperature,
        rationalization: a.rationalization,
        max_in_flight: a.max_in_flight,
        format: match a.format {
            FormatArg::PromptCompletion => ExportFormat::PromptCompletion,
            FormatArg::Chat => ExportFormat::Chat,
        },
        ..Default::default()
    };
    if a.backend == BackendKind::Http && (a.base_url.is_none() || a.model.is_none()) {
        return Err(CliError::usage("the http backend needs --base-url and --model"));
    }
    let verdicts = a.verdicts.as_deref().map(VerdictFile::load).transpose()?;
    let checker = verdicts.as_ref().map(|v| v as &dyn CodeChecker);

    let mut factory = |t: u32| -> Result<Box<dyn GenerationBackend>, BackendError> {
        match a.backend {
            BackendKind::Oracle => Ok(Box::new(OracleBackend::new(OracleConfig {
                accuracy: a.oracle_accuracy,
                confidence_fidelity: a.oracle_fidelity,
                // each iteration's generator is a different simulated model
                seed: g.seed.wrapping_add(u64::from(t - 1)),
                common_error_rate: a.oracle_common_error_rate,
            })?)),
            BackendKind::Http => {
                let model = a.model.as_deref().unwrap_or_default().replace("{t}", &t.to_string());
                let mut c = HttpConfig::new(a.base_url.clone().unwrap_or_default(), model);
                c.api_key_env_var = a.api_key_env.clone();
                c.decode_temperature = a.decode_temperature;
                c.max_in_flight = a.max_in_flight;
                c.timeout_seconds = a.timeout;
                c.confidence_mode = match a.confidence_mode {
                    ConfidenceModeArg::NextToken => ConfidenceMode::NextToken,
                    ConfidenceModeArg::ScoredContinuations => ConfidenceMode::ScoredContinuations,
                };
                Ok(Box::new(HttpBackend::new(c)?))
            }
        }
    };
    let report = curation::run_curation(&problems, &mut factory, &config, checker, &g.out_dir, a.resume)?;
    for c in &report.iterations {
        c.check().map_err(CliError::invariant)?;
        let expected = problems.len() * a.k as usize;
        if c.n_samples != expected {
            return Err(CliError::invariant(format!(
                "iteration {}: {} eval examples, expected N x K = {expected}",
                c.iteration, c.n_samples
            )));
        }
        println!(
            "iteration {}: {} problems x {} samples, {} correct; reason {}, eval {} ({} yes / {} no){}",
            c.iteration,
            c.n_problems,
            a.k,
            c.n_correct,
            c.n_reason + c.n_rationalized,
            c.n_eval_yes + c.n_eval_no,
            c.n_eval_yes,
            c.n_eval_no,
            if c.n_rationalized > 0 {
                format!(", {} rationalized", c.n_rationalized)
            } else {
                String::new()
            }
        );
    }
    println!("wrote {}", g.out_dir.join(curation::SFT_FILE).display());
    Ok(())
}

pub fn evaluate(g: &GlobalArgs, a: &EvaluateArgs) -> CliResult<()> {
    let run = load_nonempty_run(&a.run)?;
    let problems = a.problems.as_deref().map(record::load_problems).transpose()?;
    check_run(&run, problems.as_deref())?;
    let mut report = metrics::report_for_records(&run.records, a.bins)?;
    if a.ts {
        let ev = temperature::fit_and_evaluate(
            &run.records,
            a.ts_args.val_size,
            g.seed,
            a.ts_args.ts_bounds,
            a.bins,
        )?;
        write_json(&g.out_dir.join("temperature.json"), &ev.fit)?;
        report.temperature = Some(ev.fit);
        report.ece_ts = Some(ev.ece_ts);
    }
    write_json(&g.out_dir.join("report.json"), &report)?;
    let rel = g.out_dir.join("reliability.csv");
    metrics::write_reliability_csv(&report.bins, &rel)?;

    let auroc = report.auroc.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    println!(
        "n = {}  accuracy = {:.4}  ECE = {:.4}  Brier = {:.4}  AUROC = {auroc}",
        report.n, report.accuracy, report.ece, report.brier
    );
    if let (Some(fit), Some(e)) = (&report.temperature, report.ece_ts) {
        println!(
            "T = {:.4} (NLL {:.4} -> {:.4})  ECE(+TS) = {e:.4}",
            fit.temperature, fit.nll_before, fit.nll_after
        );
    }
    Ok(())
}

pub fn ts_fit(g: &GlobalArgs, a: &TsFitArgs) -> CliResult<()> {
    let run = load_nonempty_run(&a.run)?;
    check_run(&run, None)?;
    let records = &run.records;
    let (val, rest) = temperature::validation_split(records.len(), a.ts_args.val_size, g.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    let val_records = pick(&val);
    let eval_records = if rest.is_empty() { records.clone() } else { pick(&rest) };

    let fit = temperature::fit_temperature(&val_records, a.ts_args.ts_bounds)?;
    let raw = metrics::report_for_records(&eval_records, a.bins)?;
    let scaled = temperature::scaled_outcomes(&eval_records, fit.temperature)?;
    let ece_ts = metrics::ece(&scaled, a.bins)?;
    write_json(&g.out_dir.join("temperature.json"), &fit)?;
    if a.apply {
        let out = RunFile {
            metadata: run.metadata.clone(),
            records: temperature::apply_temperature(records, fit.temperature)?,
        };
        record::save_run(&out, &g.out_dir.join("run_ts.jsonl"))?;
    }
    println!(
        "T = {:.4} on {} validation records (NLL {:.4} -> {:.4}); ECE {:.4} -> {:.4} on {} records",
        fit.temperature,
        fit.n_validation,
        fit.nll_before,
        fit.nll_after,
        raw.ece,
        ece_ts,
        eval_records.len()
    );
    for w in &fit.warnings {
        log::warn!("temperature fit: {w:?}");
    }
    Ok(())
}

fn default_ks(k_max: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = [1, 10, 30].into_iter().filter(|&k| k <= k_max).collect();
    ks.push(k_max);
    ks.sort_unstable();
    ks.dedup();
    ks
}

pub fn ensemble(g: &GlobalArgs, a: &EnsembleArgs) -> CliResult<()> {
    let run = load_nonempty_run(&a.run)?;
    let problems = record::load_problems(&a.gold)?;
    check_run(&run, Some(&problems))?;
    let gold: HashMap<String, String> = problems
        .iter()
        .map(|p| (p.id.clone(), p.gold_answer.clone()))
        .collect();
    let inputs = ensemble::inputs_from_records(&run.records);
    let k_max = inputs.iter().map(|i| i.paths.len()).min().unwrap_or(0);
    let ks = match &a.ks {
        Some(ks) => {
            if let Some(&bad) = ks.iter().find(|&&k| k == 0 || k > k_max) {
                return Err(CliError::usage(format!(
                    "K = {bad} is outside 1..={k_max}, the paths available for every problem"
                )));
            }
            ks.clone()
        }
        None => default_ks(k_max),
    };
    let modes = match a.mode {
        ModeArg::Sc => vec![AggregationMode::Sc],
        ModeArg::Cisc => vec![AggregationMode::Cisc],
        ModeArg::Both => vec![AggregationMode::Sc, AggregationMode::Cisc],
    };

    let (t, tuning) = match a.softmax_t {
        Some(t) if !(t > 0.0 && t.is_finite()) => {
            return Err(CliError::usage(format!("--softmax-t must be > 0, got {t}")))
        }
        Some(t) => (t, json!({ "source": "flag" })),
        None => {
            let (val, _) = temperature::validation_split(inputs.len(), a.tune_size, g.seed);
            let tune: Vec<_> = val.iter().map(|&i| inputs[i].clone()).collect();
            let (t, acc) = ensemble::tune_softmax_temperature(&tune, &gold, &DEFAULT_SOFTMAX_GRID)?;
            (
                t,
                json!({
                    "source": "tuned",
                    "grid": DEFAULT_SOFTMAX_GRID,
                    "n_problems": tune.len(),
                    "k": k_max,
                    "accuracy": acc,
                }),
            )
        }
    };
    let out = ensemble::sweep_from_inputs(&inputs, &ks, &modes, t, &gold, a.bins)?;
    let dir = &g.out_dir;
    let p = dir.join("ensemble.csv");
    ensemble::write_ensemble_csv(&out.decisions, &p).map_err(|e| CliError::io(&p, e))?;
    let p = dir.join("sweep.csv");
    ensemble::write_sweep_csv(&out.rows, &p).map_err(|e| CliError::io(&p, e))?;
    let p = dir.join("sweep_reliability.csv");
    ensemble::write_sweep_reliability_csv(&out.rows, &p).map_err(|e| CliError::io(&p, e))?;
    write_json(
        &dir.join("ensemble_meta.json"),
        &json!({
            "softmax_temperature": t,
            "softmax_temperature_selection": tuning,
            "modes": modes,
            "ks": ks,
            "n_problems": inputs.len(),
            "rows": out.rows.iter().map(|r| json!({
                "k": r.k,
                "mode": r.mode,
                "accuracy": r.accuracy,
                "ece": r.report.as_ref().map(|x| x.ece),
            })).collect::<Vec<_>>(),
        }),
    )?;

    println!("softmax temperature {t}");
    println!("{:>4}  {:<5} {:>9} {:>8}", "K", "mode", "accuracy", "ECE");
    for r in &out.rows {
        let ece = r.report.as_ref().map_or("-".to_string(), |x| format!("{:.4}", x.ece));
        println!("{:>4}  {:<5} {:>9.4} {:>8}", r.k, r.mode.as_str(), r.accuracy, ece);
    }
    Ok(())
}

pub fn merge_one(g: &GlobalArgs, a: &MergeArgs) -> CliResult<()> {
    let base = merge::read_tmap(&a.base)?;
    let tuned = merge::read_tmap(&a.tuned)?;
    if a.check_endpoints {
        if !merge::merge(&base, &tuned, 0.0)?.bit_eq(&base) {
            return Err(CliError::invariant("lambda = 0 does not reproduce the base map"));
        }
        if !merge::merge(&base, &tuned, 1.0)?.bit_eq(&tuned) {
            return Err(CliError::invariant("lambda = 1 does not reproduce the tuned map"));
        }
        println!("endpoints bit-identical");
    }
    let merged = merge::merge(&base, &tuned, a.lambda)?;
    let path = g.out_dir.join(merge::merged_file_name(a.lambda));
    merge::write_tmap(&merged, &path)?;
    println!(
        "merged {} tensors at lambda {} -> {}",
        merged.entries.len(),
        a.lambda,
        path.display()
    );
    Ok(())
}

pub fn sweep(g: &GlobalArgs, a: &SweepArgs) -> CliResult<()> {
    let manifest = merge::sweep(&a.base, &a.tuned, &a.grid, &g.out_dir)?;
    for e in &manifest.outputs {
        println!("lambda {:.2} -> {}", e.lambda, e.path.display());
    }
    Ok(())
}

pub fn pareto(g: &GlobalArgs, a: &ParetoArgs) -> CliResult<()> {
    let rows = merge::read_results_csv(&a.results, a.model.as_deref())?;
    if rows.is_empty() {
        return Err(CliError::input(match &a.model {
            Some(m) => format!("no rows for model {m:?} in {}", a.results.display()),
            None => format!("no rows in {}", a.results.display()),
        }));
    }
    let classes = merge::pareto_classify(&rows, &a.baseline)?;
    let path = g.out_dir.join("pareto.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::input(e.to_string()))?;
    for c in &classes {
        w.serialize(c).map_err(|e| CliError::input(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    let width = classes.iter().map(|c| c.method.len()).max().unwrap_or(6);
    for c in &classes {
        let zone = serde_json::to_value(c.zone).expect("zone serialises");
        println!(
            "{:<width$}  {:<16} dacc {:+.4}  dece {:+.4}",
            c.method,
            zone.as_str().unwrap_or_default(),
            c.delta_accuracy,
            c.delta_ece
        );
    }
    Ok(())
}

fn parse_tokens(text: &str) -> CliResult<Vec<TokenId>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or_default();
        for tok in body.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let id = tok.parse::<TokenId>().map_err(|_| {
                CliError::input(format!("line {}: {tok:?} is not a token id", i + 1))
                    .with(json!({ "line": i + 1 }))
            })?;
            out.push(id);
        }
    }
    Ok(out)
}

pub fn aid_trace(g: &GlobalArgs, a: &AidTraceArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.tokens).map_err(|e| CliError::io(&a.tokens, e))?;
    let proposed = parse_tokens(&text)?;
    let vocab = ToyVocab::standard();
    let mut cfg = vocab.config(a.max_len);
    if let Some(m) = a.soft_margin {
        cfg.soft_margin = m;
    }
    cfg.max_box_content = a.max_box_content;
    if let Some(&bad) = proposed.iter().find(|&&t| t as usize >= vocab.len()) {
        return Err(CliError::input(format!("token {bad} is outside the {}-symbol vocabulary", vocab.len())));
    }
    // once the file runs out the model is taken to propose EOS
    let n_given = proposed.len();
    let bound = n_given + 2 * a.max_len + cfg.injection_tokens.len() + cfg.max_box_content + 8;
    let stream = proposed
        .into_iter()
        .chain(std::iter::repeat(ToyVocab::EOS))
        .take(bound);
    let outcome = aid::run_to_completion(stream, &cfg)?;
    let rendered = vocab.render(&outcome.tokens);
    write_json(
        &g.out_dir.join("aid_trace.json"),
        &json!({
            "tokens": outcome.tokens,
            "text": rendered,
            "forced": outcome.forced,
            "suppressed": outcome.suppressed,
            "proposed_from_file": n_given,
            "steps": outcome.trace.len(),
            "trace": outcome.trace,
        }),
    )?;
    println!(
        "{} tokens, {} forced, {} suppressed over {} steps",
        outcome.tokens.len(),
        outcome.forced,
        outcome.suppressed,
        outcome.trace.len()
    );
    println!("{rendered}");
    Ok(())
}

pub fn extract(a: &ExtractArgs) -> CliResult<()> {
    let mut text = String::new();
    std::io::stdin()
        .read_to_string(&mut text)
        .map_err(|e| CliError::input(format!("reading stdin: {e}")))?;
    let result = match a.mode {
        ExtractMode::Answer => extract::extract_answer(&text),
        ExtractMode::Boxed => extract::extract_boxed(&text),
        ExtractMode::Code => extract::extract_code(&text, &a.signature),
    };
    println!("{}", serde_json::to_string(&result).expect("result serialises"));
    Ok(())
}

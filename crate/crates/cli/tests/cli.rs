use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::io::Write;

use calibra::merge::{self, Tensor, TensorMap};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_calibra"));
    c.env("SOURCE_DATE_EPOCH", "1700000000").env_remove("RUST_LOG");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text}"))
}

fn write_problems(dir: &Path, n: usize) -> PathBuf {
    let path = dir.join("problems.jsonl");
    let lines: Vec<String> = (0..n)
        .map(|i| {
            serde_json::json!({
                "id": format!("p{i}"),
                "prompt": format!("What is {i} + {i}?"),
                "gold_answer": (2 * i).to_string(),
                "domain_tag": "math",
            })
            .to_string()
        })
        .collect();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn curate(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["curate", "--problems", "problems.jsonl", "--k", "3", "--seed", "7", "--out-dir", out];
    args.extend_from_slice(extra);
    run(dir, &args)
}

#[test]
fn curate_writes_one_eval_line_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 10);
    let out = curate(dir.path(), "o", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sft = lines(&dir.path().join("o/sft_total.jsonl"));
    let eval = sft.iter().filter(|l| l["task"] == "self_evaluation").count();
    let reason = sft.iter().filter(|l| l["task"] == "reasoning").count();
    assert_eq!(eval, 30);
    let yes = sft.iter().filter(|l| l["label"] == "yes").count();
    assert_eq!(reason, yes);
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/curation_report.json")).unwrap()).unwrap();
    assert_eq!(report["iterations"][0]["n_samples"], 30);
    let eff: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("o/effective_config.json")).unwrap()).unwrap();
    assert_eq!(eff["subcommand"], "curate");
    assert_eq!(eff["command"]["k"], 3);
    assert_eq!(eff["global"]["seed"], 7);
    assert!(String::from_utf8_lossy(&out.stdout).contains("30 ("));
}

#[test]
fn curate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 12);
    assert!(curate(dir.path(), "a", &["--iterations", "2"]).status.success());
    assert!(curate(dir.path(), "b", &["--iterations", "2"]).status.success());
    for f in ["sft_total.jsonl", "iter_1/run.jsonl", "iter_2/run.jsonl", "iter_2/sft_total.jsonl", "curation_report.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_problem_file_exits_2_with_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = curate(dir.path(), "o", &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "input");
    assert_eq!(err["exit_code"], 2);
}

#[test]
fn resume_after_interrupt_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 10);
    assert!(curate(dir.path(), "full", &[]).status.success());

    // simulate an interruption: keep the metadata line and the first 13 records
    assert!(curate(dir.path(), "cut", &[]).status.success());
    let run_path = dir.path().join("cut/iter_1/run.jsonl");
    let text = fs::read_to_string(&run_path).unwrap();
    let kept: Vec<&str> = text.lines().take(14).collect();
    fs::write(&run_path, kept.join("\n") + "\n").unwrap();
    fs::remove_file(dir.path().join("cut/sft_total.jsonl")).unwrap();
    fs::remove_file(dir.path().join("cut/iter_1/sft_total.jsonl")).unwrap();

    let out = curate(dir.path(), "cut", &["--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["sft_total.jsonl", "iter_1/run.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("full").join(f)).unwrap(),
            fs::read(dir.path().join("cut").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn http_backend_without_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 2);
    let out = bin()
        .current_dir(dir.path())
        .env_remove("CALIBRA_TEST_NO_SUCH_KEY")
        .args([
            "curate", "--problems", "problems.jsonl", "--backend", "http", "--base-url",
            "http://127.0.0.1:9", "--model", "m", "--api-key-env", "CALIBRA_TEST_NO_SUCH_KEY",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["message"].as_str().unwrap().contains("CALIBRA_TEST_NO_SUCH_KEY"));
}

const META: &str = r#"{"_meta":{"model_name":"fixture","decode_temperature":0.0,"k":2,"created_at":"2024-01-01T00:00:00Z"}}"#;

fn record(pid: &str, idx: u32, answer: &str, correct: bool, conf: f64) -> String {
    // logprobs chosen so that σ(ly - ln) = conf exactly enough for the 1e-12 check
    let z = (conf / (1.0 - conf)).ln();
    let ly = -(1.0 + (-z).exp()).ln();
    let ln = ly - z;
    serde_json::json!({
        "problem_id": pid, "sample_index": idx, "path": format!("\\boxed{{{answer}}}"),
        "raw_answer": answer, "answer": answer, "correct": correct,
        "logprob_yes": ly, "logprob_no": ln,
    })
    .to_string()
}

fn golden_run(dir: &Path) -> PathBuf {
    let path = dir.join("run.jsonl");
    let recs = [
        record("p0", 0, "0", true, 0.8),
        record("p0", 1, "5", false, 0.3),
        record("p1", 0, "2", true, 0.9),
        record("p1", 1, "7", false, 0.6),
    ];
    fs::write(&path, format!("{META}\n{}\n", recs.join("\n"))).unwrap();
    path
}

#[test]
fn evaluate_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    golden_run(dir.path());
    let out = run(dir.path(), &["evaluate", "--run", "run.jsonl", "--out-dir", "e"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/report.json")).unwrap()).unwrap();
    // bins: 0.3 -> (0.2,0.3], 0.6 -> (0.5,0.6], 0.8 -> (0.7,0.8], 0.9 -> (0.8,0.9]
    // ECE = (0.3 + 0.6 + 0.2 + 0.1) / 4
    let close = |v: &Value, x: f64| (v.as_f64().unwrap() - x).abs() < 1e-9;
    assert!(close(&r["ece"], 0.3));
    assert!(close(&r["brier"], (0.04 + 0.09 + 0.01 + 0.36) / 4.0));
    assert!(close(&r["auroc"], 1.0));
    assert!(close(&r["accuracy"], 0.5));
    assert_eq!(r["n"], 4);
    let csv = fs::read_to_string(dir.path().join("e/reliability.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("index,lower,upper,count,mean_confidence,accuracy"));
}

#[test]
fn evaluate_with_ts_reports_scaled_ece() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 30);
    assert!(run(dir.path(), &["curate", "--problems", "problems.jsonl", "--k", "4", "--out-dir", "c"]).status.success());
    let out = run(dir.path(), &["evaluate", "--run", "c/iter_1/run.jsonl", "--problems", "problems.jsonl", "--ts", "--out-dir", "e"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/report.json")).unwrap()).unwrap();
    assert!(r["ece_ts"].is_number());
    let t = &r["temperature"];
    assert!(t["nll_after"].as_f64().unwrap() <= t["nll_before"].as_f64().unwrap() + 1e-9);
    assert!(dir.path().join("e/temperature.json").exists());
}

#[test]
fn evaluate_empty_run_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.jsonl"), format!("{META}\n")).unwrap();
    let out = run(dir.path(), &["evaluate", "--run", "run.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "input");
}

#[test]
fn ts_fit_apply_writes_a_valid_scaled_run() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 30);
    assert!(run(dir.path(), &["curate", "--problems", "problems.jsonl", "--k", "4", "--oracle-fidelity", "3", "--out-dir", "c"]).status.success());
    let out = run(dir.path(), &["ts-fit", "--run", "c/iter_1/run.jsonl", "--apply", "--out-dir", "t"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t/temperature.json")).unwrap()).unwrap();
    assert!(fit["temperature"].as_f64().unwrap() > 0.0);
    let e1 = run(dir.path(), &["evaluate", "--run", "c/iter_1/run.jsonl", "--out-dir", "e1"]);
    let e2 = run(dir.path(), &["evaluate", "--run", "t/run_ts.jsonl", "--out-dir", "e2"]);
    assert!(e2.status.success(), "{}", String::from_utf8_lossy(&e2.stderr));
    let read = |d: &str| -> Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join(d).join("report.json")).unwrap()).unwrap()
    };
    assert!(e1.status.success());
    assert_eq!(read("e1")["auroc"], read("e2")["auroc"]);
}

#[test]
fn ensemble_k1_rows_match_and_flags_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 20);
    assert!(run(dir.path(), &["curate", "--problems", "problems.jsonl", "--k", "5", "--out-dir", "c"]).status.success());
    let out = run(dir.path(), &[
        "ensemble", "--run", "c/iter_1/run.jsonl", "--gold", "problems.jsonl", "--ks", "1,5",
        "--softmax-t", "0.5", "--out-dir", "e",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/ensemble_meta.json")).unwrap()).unwrap();
    assert_eq!(meta["softmax_temperature"], 0.5);
    assert_eq!(meta["softmax_temperature_selection"]["source"], "flag");
    let rows = meta["rows"].as_array().unwrap();
    let k1: Vec<&Value> = rows.iter().filter(|r| r["k"] == 1).collect();
    assert_eq!(k1.len(), 2);
    assert_eq!(k1[0]["accuracy"], k1[1]["accuracy"]);
    assert_eq!(k1[0]["ece"], k1[1]["ece"]);
    for f in ["ensemble.csv", "sweep.csv", "sweep_reliability.csv"] {
        assert!(dir.path().join("e").join(f).exists(), "{f}");
    }

    let out = run(dir.path(), &["ensemble", "--run", "c/iter_1/run.jsonl", "--gold", "missing.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(dir.path(), &["ensemble", "--run", "c/iter_1/run.jsonl", "--gold", "problems.jsonl", "--ks", "9"]);
    assert_eq!(out.status.code(), Some(2));
}

fn tmap(dir: &Path, name: &str, scale: f32) -> PathBuf {
    let mut m = TensorMap::new();
    m.insert("w", Tensor::new(vec![2, 3], (0..6).map(|i| i as f32 * scale).collect()));
    m.insert("b", Tensor::new(vec![3], vec![-0.0, 1.0, scale]));
    let path = dir.join(name);
    merge::write_tmap(&m, &path).unwrap();
    path
}

#[test]
fn merge_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    tmap(dir.path(), "base.tmap", 1.0);
    tmap(dir.path(), "tuned.tmap", 3.0);
    let out = run(dir.path(), &["merge", "--base", "base.tmap", "--tuned", "tuned.tmap", "--lambda", "0.5", "--check-endpoints", "--out-dir", "m"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let merged = merge::read_tmap(&dir.path().join("m/merged_lambda_0.50.tmap")).unwrap();
    assert_eq!(merged.entries["w"].data, vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);

    let out = run(dir.path(), &["sweep", "--base", "base.tmap", "--tuned", "tuned.tmap", "--grid", "0,0.5,1", "--out-dir", "s"]);
    assert!(out.status.success());
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s/merge_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);

    fs::write(dir.path().join("bad.tmap"), b"TMAPv001\xff\xff").unwrap();
    let out = run(dir.path(), &["merge", "--base", "bad.tmap", "--tuned", "tuned.tmap", "--lambda", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_json(&out)["details"]["offset"].is_u64());
}

#[test]
fn pareto_on_the_published_table() {
    let dir = tempfile::tempdir().unwrap();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/llama3_results.csv");
    let out = run(dir.path(), &["pareto", "--results", fixture.to_str().unwrap(), "--model", "Llama-3-3B", "--out-dir", "p"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(dir.path().join("p/pareto.csv")).unwrap();
    let zones: Vec<(String, String)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].to_string())
        })
        .collect();
    let zone = |m: &str| zones.iter().find(|(n, _)| n == m).unwrap().1.clone();
    assert_eq!(zone("Ours"), "pareto_superior");
    assert_ne!(zone("STaR"), "pareto_superior");
}

#[test]
fn aid_trace_completes_a_boxed_answer() {
    let dir = tempfile::tempdir().unwrap();
    // "1+1" then EOS: the machine injects the answer phrase before stopping
    fs::write(dir.path().join("t.txt"), "12 # one\n37 12 0\n").unwrap();
    let out = run(dir.path(), &["aid-trace", "--tokens", "t.txt", "--max-len", "200", "--out-dir", "a"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/aid_trace.json")).unwrap()).unwrap();
    let text = trace["text"].as_str().unwrap();
    assert!(text.starts_with("1+1\nSo, the answer is \\boxed{"), "{text}");
    assert!(text.ends_with('}'), "{text}");
    assert_eq!(trace["tokens"].as_array().unwrap().last().unwrap(), 0);
}

#[test]
fn extract_reads_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .current_dir(dir.path())
        .args(["extract"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"so we get \\boxed{\\frac{1}{2}} in the end")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["raw_span"], "\\frac{1}{2}");
    assert_eq!(v["method"], "boxed");
    assert_eq!(v["complete"], true);
}

#[test]
fn config_file_supplies_flags() {
    let dir = tempfile::tempdir().unwrap();
    write_problems(dir.path(), 4);
    fs::write(
        dir.path().join("c.conf"),
        "seed = 11\nout_dir = from_config\n[curate]\nproblems = problems.jsonl\nk = 2\n",
    )
    .unwrap();
    let out = run(dir.path(), &["--config", "c.conf", "curate", "--k", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let eff: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("from_config/effective_config.json")).unwrap()).unwrap();
    assert_eq!(eff["global"]["seed"], 11);
    assert_eq!(eff["command"]["k"], 5);
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["evaluate", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"], "usage");
    let out = run(dir.path(), &["--help"]);
    assert!(out.status.success());
}

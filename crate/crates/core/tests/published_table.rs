use approx::assert_abs_diff_eq;
use calibra::merge::{self, ParetoZone};
use calibra::metrics::{self, ScoredOutcome};
use std::path::Path;

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

// 429 of 5000 correct at a constant confidence of 0.1938 gives the
// 8.58% accuracy and 0.108 ECE listed for the fine-tuned 3B model.
#[test]
fn constant_confidence_reproduces_table_row() {
    let o: Vec<ScoredOutcome> = (0..5000).map(|i| ScoredOutcome::new(0.1938, i < 429)).collect();
    let r = metrics::full_report(&o, 10).unwrap();
    assert_abs_diff_eq!(r.accuracy, 0.0858, epsilon = 1e-12);
    assert_abs_diff_eq!(r.ece, 0.108, epsilon = 1e-9);
    assert_eq!(r.auroc, Some(0.5));
}

#[test]
fn every_row_gets_a_zone() {
    for (file, model) in [
        ("llama3_results.csv", "Llama-3-1B"),
        ("llama3_results.csv", "Llama-3-3B"),
        ("qwen3_results.csv", "Qwen-3-1.7B"),
    ] {
        let rows = merge::read_results_csv(&fixture(file), Some(model)).unwrap();
        assert!(rows.len() > 1, "{model}");
        let classes = merge::pareto_classify(&rows, "Base Model").unwrap();
        assert_eq!(classes.len(), rows.len(), "{model}");
        let base = classes.iter().find(|c| c.method == "Base Model").unwrap();
        assert_eq!((base.delta_accuracy, base.delta_ece), (0.0, 0.0));
    }
}

#[test]
fn ours_dominates_base_on_3b() {
    let rows = merge::read_results_csv(&fixture("llama3_results.csv"), Some("Llama-3-3B")).unwrap();
    let classes = merge::pareto_classify(&rows, "Base Model").unwrap();
    let ours = classes.iter().find(|c| c.method == "Ours").unwrap();
    assert_eq!(ours.zone, ParetoZone::ParetoSuperior);
    assert_abs_diff_eq!(ours.delta_accuracy, 8.58 - 7.56, epsilon = 1e-9);
    assert_abs_diff_eq!(ours.delta_ece, 0.108 - 0.376, epsilon = 1e-9);
}

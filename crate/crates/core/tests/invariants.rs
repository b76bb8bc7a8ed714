use approx::assert_abs_diff_eq;
use calibra::aid::{self, ToyVocab, TokenId};
use calibra::ensemble::{self, EnsembleInput, PathVote};
use calibra::merge::{self, Tensor, TensorMap};
use calibra::metrics::{self, ScoredOutcome};
use calibra::temperature;
use calibra::GenerationRecord;
use proptest::prelude::*;

fn outcomes() -> impl Strategy<Value = Vec<ScoredOutcome>> {
    prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..200)
        .prop_map(|v| v.into_iter().map(|(c, o)| ScoredOutcome::new(c, o)).collect())
}

fn record(i: usize, z: f64, correct: bool) -> GenerationRecord {
    let ls = |x: f64| -(-x).exp().ln_1p();
    GenerationRecord {
        problem_id: format!("q{i}"),
        sample_index: 0,
        path: String::new(),
        raw_answer: String::new(),
        answer: String::new(),
        correct,
        logprob_yes: if z >= 0.0 { ls(z) } else { z - z.exp().ln_1p() },
        logprob_no: if z >= 0.0 { -z - (-z).exp().ln_1p() } else { ls(-z) },
        confidence: None,
    }
}

proptest! {
    #[test]
    fn ece_and_brier_stay_in_unit_interval(o in outcomes(), m in 1usize..30) {
        let e = metrics::ece(&o, m).unwrap();
        let b = metrics::brier(&o).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn metrics_ignore_order(o in outcomes(), seed in any::<u64>()) {
        let mut shuffled = o.clone();
        let n = shuffled.len();
        shuffled.rotate_left((seed as usize) % n);
        shuffled.reverse();
        assert_abs_diff_eq!(metrics::ece(&o, 10).unwrap(), metrics::ece(&shuffled, 10).unwrap(), epsilon = 1e-12);
        assert_abs_diff_eq!(metrics::brier(&o).unwrap(), metrics::brier(&shuffled).unwrap(), epsilon = 1e-12);
        prop_assert_eq!(metrics::auroc(&o).is_some(), metrics::auroc(&shuffled).is_some());
        if let (Some(a), Some(b)) = (metrics::auroc(&o), metrics::auroc(&shuffled)) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn bins_partition_the_outcomes(o in outcomes(), m in 1usize..30) {
        let bins = metrics::reliability_bins(&o, m);
        prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), o.len());
    }

    #[test]
    fn temperature_keeps_auroc(
        v in prop::collection::vec((-8.0..8.0f64, any::<bool>()), 2..100),
        t in 0.05..10.0f64,
    ) {
        let records: Vec<_> = v.iter().enumerate().map(|(i, &(z, o))| record(i, z, o)).collect();
        let before: Vec<ScoredOutcome> = records.iter().map(ScoredOutcome::from).collect();
        let scaled = temperature::apply_temperature(&records, t).unwrap();
        let after: Vec<ScoredOutcome> = scaled.iter().map(ScoredOutcome::from).collect();
        prop_assert_eq!(metrics::auroc(&before), metrics::auroc(&after));
        for r in &scaled {
            prop_assert!(r.check().is_ok());
        }
    }

    #[test]
    fn cisc_weights_form_a_distribution(
        paths in prop::collection::vec((0usize..4, 0.0..=1.0f64), 1..20),
        t in 0.01..100.0f64,
    ) {
        let input = EnsembleInput::new(
            "p",
            paths.iter().map(|&(a, c)| PathVote::new(["A", "B", "C", "D"][a], c)).collect(),
        );
        let w = ensemble::cisc_weights(&input, t).unwrap();
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        let d = ensemble::cisc(&input, t).unwrap();
        assert_abs_diff_eq!(d.answer_scores.values().sum::<f64>(), 1.0, epsilon = 1e-9);
        prop_assert!(input.paths.iter().any(|p| p.answer == d.answer));
    }

    #[test]
    fn merge_stays_between_operands(
        pairs in prop::collection::vec((-1e3..1e3f32, -1e3..1e3f32), 1..64),
        lambda in 0.0..=1.0f64,
    ) {
        let (a, b): (Vec<f32>, Vec<f32>) = pairs.into_iter().unzip();
        let n = a.len();
        let mut base = TensorMap::new();
        base.insert("w", Tensor::new(vec![n], a.clone()));
        let mut tuned = TensorMap::new();
        tuned.insert("w", Tensor::new(vec![n], b.clone()));
        let m = merge::merge(&base, &tuned, lambda).unwrap();
        for (i, &x) in m.entries["w"].data.iter().enumerate() {
            let (lo, hi) = (a[i].min(b[i]), a[i].max(b[i]));
            let slack = (hi.abs().max(lo.abs())) * 4.0 * f32::EPSILON;
            prop_assert!(x >= lo - slack && x <= hi + slack);
        }
        let bytes = merge::encode_tmap(&m).unwrap();
        prop_assert!(merge::decode_tmap(&bytes).unwrap().bit_eq(&m));
    }

    #[test]
    fn aid_always_ends_with_a_closed_box(
        tokens in prop::collection::vec(0u32..50, 0..300),
        max_len in 8usize..200,
        cap in 1usize..40,
    ) {
        let vocab = ToyVocab::standard();
        let mut cfg = vocab.config(max_len);
        cfg.max_box_content = cap;
        let stream = tokens.into_iter().chain(std::iter::repeat(ToyVocab::OPEN_BRACE)).take(10_000);
        let out = aid::run_to_completion(stream, &cfg).unwrap();
        let t: &[TokenId] = &out.tokens;
        prop_assert_eq!(t.last(), Some(&ToyVocab::EOS));
        prop_assert_eq!(t.iter().filter(|&&x| x == ToyVocab::EOS).count(), 1);
        prop_assert!(t.len() <= max_len + ToyVocab::INJECTION.len() + 2);
        let text = vocab.render(t);
        prop_assert!(matches!(calibra::extract::last_boxed_span(&text), Some((_, _, true))));
    }
}

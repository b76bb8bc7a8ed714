//! Seeded workloads shared by the benchmarks.

use calibra::metrics::ScoredOutcome;
use calibra::{DomainTag, Problem};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` outcomes with `c ~ U(0, 1)` and correctness drawn as `Bernoulli(c)`.
pub fn calibrated_outcomes(n: usize, seed: u64) -> Vec<ScoredOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c: f64 = rng.random();
            ScoredOutcome::new(c, rng.random::<f64>() < c)
        })
        .collect()
}

pub fn arithmetic_problems(n: usize) -> Vec<Problem> {
    (0..n)
        .map(|i| Problem {
            id: format!("p{i:04}"),
            prompt: format!("What is {i} plus {i}?"),
            gold_answer: (2 * i).to_string(),
            domain_tag: DomainTag::Math,
            signature: None,
        })
        .collect()
}

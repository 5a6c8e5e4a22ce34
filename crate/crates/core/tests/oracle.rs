mod common;

use catgrad_core::estimators::{self, EstimatorConfig, EstimatorKind};
use catgrad_core::{exact_expectation, exact_gradient, rng, Factorisation, FnObjective, LogitTable, DEFAULT_BUDGET};
use proptest::prelude::*;

fn cards_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(2usize..=4, 1..=3)
}

fn lookup(cards: &[usize], seed: u64) -> Vec<f64> {
    let size: usize = cards.iter().product();
    (0..size).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 100.0 - 5.0).collect()
}

fn index(cards: &[usize], x: &[usize]) -> usize {
    x.iter().zip(cards).fold(0, |acc, (&v, &k)| acc * k + v)
}

fn factorisation(cards: &[usize], chain: bool, seed: u64) -> Factorisation {
    let mut r = rng::seeded(seed);
    if chain {
        Factorisation::random_chain(cards, 1.5, &mut r).unwrap()
    } else {
        Factorisation::independent(&LogitTable::random(cards, 1.5, &mut r).unwrap())
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn enumeration_matches_reference(cards in cards_strategy(), chain in any::<bool>(), seed in 0u64..1000) {
        let fact = factorisation(&cards, chain, seed);
        let values = lookup(&cards, seed);
        let fr = |x: &[usize]| values[index(&cards, x)];
        let f = FnObjective::new(fr);
        let e = exact_expectation(&fact, &f, DEFAULT_BUDGET).unwrap();
        prop_assert!((e - common::expectation(&fact, &fr)).abs() < 1e-10);
        let g = exact_gradient(&fact, &f, DEFAULT_BUDGET).unwrap().flatten();
        let want = common::gradient(&fact, &fr);
        prop_assert_eq!(g.len(), want.len());
        for (a, b) in g.iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10, "{} vs {}", a, b);
        }
    }

    #[test]
    fn gradient_rows_sum_to_zero(cards in cards_strategy(), chain in any::<bool>(), seed in 0u64..1000) {
        let fact = factorisation(&cards, chain, seed);
        let values = lookup(&cards, seed + 1);
        let f = FnObjective::new(|x: &[usize]| values[index(&cards, x)]);
        let g = exact_gradient(&fact, &f, DEFAULT_BUDGET).unwrap();
        for d in 0..fact.dims() {
            for r in 0..fact.rows_of(d) {
                prop_assert!(g.row(d, r).iter().sum::<f64>().abs() < 1e-10);
            }
        }
    }

    #[test]
    fn indecater_is_exact_for_additive_objectives(cards in cards_strategy(), seed in 0u64..1000, n in 1usize..4) {
        let fact = factorisation(&cards, false, seed);
        let terms: Vec<Vec<f64>> = cards.iter().enumerate().map(|(d, &k)| lookup(&[k], seed + d as u64)).collect();
        let f = FnObjective::new(|x: &[usize]| x.iter().enumerate().map(|(d, &v)| terms[d][v]).sum());
        let exact = exact_gradient(&fact, &f, DEFAULT_BUDGET).unwrap();
        let est = estimators::indecater(&fact, &f, n, false, &mut rng::seeded(seed)).unwrap();
        prop_assert!(est.grad.max_abs_diff(&exact) < 1e-10);
    }

    #[test]
    fn scater_matches_indecater_on_independent_factors(cards in cards_strategy(), seed in 0u64..1000, n in 1usize..4) {
        let fact = factorisation(&cards, false, seed);
        let values = lookup(&cards, seed);
        let f = FnObjective::new(|x: &[usize]| values[index(&cards, x)]);
        let a = estimators::indecater(&fact, &f, n, false, &mut rng::seeded(seed)).unwrap();
        let b = estimators::scater(&fact, &f, n, false, &mut rng::seeded(seed)).unwrap();
        prop_assert!(a.grad.max_abs_diff(&b.grad) < 1e-12);
    }

    #[test]
    fn sample_counts_follow_the_cost_model(cards in cards_strategy(), seed in 0u64..1000, n in 2usize..5) {
        let fact = factorisation(&cards, false, seed);
        let f = FnObjective::new(|x: &[usize]| x.iter().sum::<usize>() as f64);
        for kind in [EstimatorKind::Reinforce, EstimatorKind::Rloo, EstimatorKind::Indecater, EstimatorKind::Scater, EstimatorKind::Leg] {
            let cfg = EstimatorConfig::new(kind, n);
            let e = estimators::estimate(&cfg, &fact, &f, 0, &mut rng::seeded(seed)).unwrap();
            let (samples, evals) = cfg.cost(&cards);
            prop_assert_eq!((e.samples_drawn, e.function_evals), (samples, evals), "{:?}", kind);
        }
    }
}

#[test]
fn support_budget_is_enforced() {
    let fact = factorisation(&[4; 6], false, 0);
    let f = FnObjective::new(|_: &[usize]| 1.0);
    assert!(exact_expectation(&fact, &f, 1000).is_err());
    assert!((exact_expectation(&fact, &f, 4096).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn sample_frequencies_match_probabilities() {
    let fact = factorisation(&[2, 3], true, 9);
    let n = 60_000;
    let batch = fact.sample_ancestral(n, &mut rng::seeded(3)).unwrap();
    let mut counts = [0usize; 6];
    for x in batch.iter() {
        counts[index(&[2, 3], x)] += 1;
    }
    common::for_each_assignment(&[2, 3], |x| {
        let p = common::prob(&fact, x);
        let se = (p * (1.0 - p) / n as f64).sqrt();
        let freq = counts[index(&[2, 3], x)] as f64 / n as f64;
        assert!((freq - p).abs() < 5.0 * se, "{x:?}: {freq} vs {p}");
    });
}

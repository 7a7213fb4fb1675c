mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;

use diagbed::belief::{
    entropy_bernoulli, entropy_eig, expected_kl, expected_kl_weighted, kl_bernoulli, stopping_threshold,
    utility, Belief, CostModel, StoppingPolicy,
};
use diagbed::dataset::{load_dataset, render_vignette, write_dataset, Value};
use diagbed::engine::{score_candidate, select_next, Criterion};
use diagbed::harness::metrics::{
    bayesian_bootstrap, best_of_k_mae, compute_classification_metrics, energy_distance_1d, wasserstein_1d,
};
use diagbed::surrogate::{parse_strict_float, OutcomeSample, SyntheticWorld};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn prob() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn interior() -> impl Strategy<Value = f64> {
    0.001..0.999f64
}

proptest! {
    #[test]
    fn kl_is_nonnegative(q in prob(), p in prob()) {
        prop_assert!(kl_bernoulli(q, p) >= 0.0);
    }

    #[test]
    fn kl_vanishes_on_diagonal(p in prob()) {
        prop_assert!(kl_bernoulli(p, p).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_reference(q in interior(), p in interior()) {
        let reference = common::kl(q, p);
        prop_assert!((kl_bernoulli(q, p) - reference).abs() <= 1e-9 * reference.max(1.0));
    }

    #[test]
    fn entropy_is_bounded_and_symmetric(p in prob()) {
        let h = entropy_bernoulli(p);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&h));
        prop_assert!((h - entropy_bernoulli(1.0 - p)).abs() < 1e-12);
    }

    #[test]
    fn expected_kl_is_bounded_by_extremes(prior in interior(), draws in prop::collection::vec(prob(), 1..20)) {
        let b = Belief::new(prior).unwrap();
        let e = expected_kl(&draws, b).unwrap();
        let each: Vec<f64> = draws.iter().map(|&q| kl_bernoulli(q, prior)).collect();
        let lo = each.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = each.iter().cloned().fold(0.0, f64::max);
        prop_assert!(e >= lo - 1e-12 && e <= hi + 1e-12);
    }

    #[test]
    fn unit_weights_match_plain_mean(prior in interior(), draws in prop::collection::vec(prob(), 1..20)) {
        let b = Belief::new(prior).unwrap();
        let ones = vec![1.0; draws.len()];
        let a = expected_kl(&draws, b).unwrap();
        let w = expected_kl_weighted(&draws, &ones, b).unwrap();
        prop_assert!((a - w).abs() < 1e-12);
    }

    #[test]
    fn entropy_eig_of_unmoved_posterior_is_zero(prior in interior(), n in 1usize..10) {
        let b = Belief::new(prior).unwrap();
        prop_assert!(entropy_eig(b, &vec![prior; n]).unwrap().abs() < 1e-12);
        prop_assert!(expected_kl(&vec![prior; n], b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn threshold_increases_with_gamma(prior in interior(), theta in 0.05..0.95f64, g1 in 0.0..=1.0f64, g2 in 0.0..=1.0f64) {
        prop_assume!((prior - theta).abs() > 1e-3);
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        prop_assume!(hi - lo > 1e-6);
        let b = Belief::new(prior).unwrap();
        let p_hi = StoppingPolicy::new(theta, hi).unwrap();
        let t_lo = stopping_threshold(b, &StoppingPolicy::new(theta, lo).unwrap());
        let t_hi = stopping_threshold(b, &p_hi);
        prop_assert!(t_hi >= t_lo, "gamma {lo}->{hi}: {t_lo} vs {t_hi}");
        // strict until the target saturates at the probability clamp
        let q = p_hi.target(b);
        if q > 1e-3 && q < 1.0 - 1e-3 {
            prop_assert!(t_hi > t_lo, "gamma {lo}->{hi}: {t_lo} vs {t_hi}");
        }
    }

    #[test]
    fn target_crosses_boundary(prior in interior(), theta in 0.05..0.95f64, gamma in 0.0..=1.0f64) {
        let policy = StoppingPolicy::new(theta, gamma).unwrap();
        let b = Belief::new(prior).unwrap();
        let q = policy.target(b);
        prop_assert!((0.0..=1.0).contains(&q));
        if prior < theta {
            prop_assert!(q >= theta);
        } else {
            prop_assert!(q <= theta);
        }
        prop_assert!((stopping_threshold(b, &policy) - kl_bernoulli(q, prior)).abs() < 1e-15);
    }

    #[test]
    fn uniform_utility_is_identity(gain in 0.0..5.0f64) {
        prop_assert_eq!(utility(gain, "x", &CostModel::uniform()).unwrap(), gain);
    }

    #[test]
    fn select_next_picks_argmax(prior in interior(), risks in prop::collection::vec(prop::collection::vec(prob(), 2..6), 1..6)) {
        let b = Belief::new(prior).unwrap();
        let rows: Vec<_> = risks
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let name = format!("f{i}");
                let samples = r.iter().map(|_| OutcomeSample::new(&name, Value::Number(0.0), "")).collect();
                score_candidate(&name, samples, r.clone(), b, &CostModel::uniform()).unwrap()
            })
            .collect();
        let chosen = select_next(&rows, Criterion::Kl).unwrap();
        let best = rows.iter().map(|r| r.utility).fold(f64::NEG_INFINITY, f64::max);
        let row = rows.iter().find(|r| r.feature == chosen).unwrap();
        prop_assert_eq!(row.utility, best);
        // ties resolve to the earliest candidate
        let first = rows.iter().find(|r| r.utility == best).unwrap();
        prop_assert_eq!(&first.feature, &chosen);
    }

    #[test]
    fn strict_float_roundtrips(x in -1e6..1e6f64) {
        prop_assert_eq!(parse_strict_float(&format!(" {x}\n")).unwrap(), x);
        let extra = format!("{x} mg");
        prop_assert!(parse_strict_float(&extra).is_err());
    }

    #[test]
    fn metrics_are_probabilities(pairs in prop::collection::vec((0u8..=1, prob()), 1..40)) {
        let labels: Vec<u8> = pairs.iter().map(|p| p.0).collect();
        let risks: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let m = compute_classification_metrics(&labels, &risks, 0.5).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        if let Some(auc) = m.auc {
            prop_assert!((0.0..=1.0).contains(&auc));
        }
    }

    #[test]
    fn distances_are_symmetric_metrics(a in prop::collection::vec(-10.0..10.0f64, 1..30), b in prop::collection::vec(-10.0..10.0f64, 1..30)) {
        let w = wasserstein_1d(&a, &b).unwrap();
        prop_assert!(w >= 0.0);
        prop_assert!((w - wasserstein_1d(&b, &a).unwrap()).abs() < 1e-9);
        prop_assert!(wasserstein_1d(&a, &a).unwrap().abs() < 1e-12);
        let e = energy_distance_1d(&a, &b).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert!((e - energy_distance_1d(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn shift_moves_wasserstein_by_offset(a in prop::collection::vec(-10.0..10.0f64, 1..30), shift in -5.0..5.0f64) {
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        prop_assert!((wasserstein_1d(&a, &b).unwrap() - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn best_of_k_is_nonincreasing(samples in prop::collection::vec(0.0..1.0f64, 1..20), truth in 0.0..1.0f64) {
        let mut last = f64::INFINITY;
        for k in 1..=samples.len() {
            let mae = best_of_k_mae(&samples, truth, k).unwrap();
            prop_assert!(mae <= last + 1e-12);
            last = mae;
        }
    }

    #[test]
    fn bootstrap_interval_brackets_mean(values in prop::collection::vec(-5.0..5.0f64, 2..40), seed in any::<u64>()) {
        let s = bayesian_bootstrap(&values, 200, seed).unwrap();
        prop_assert!(s.lower <= s.mean && s.mean <= s.upper);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(s.lower >= lo - 1e-12 && s.upper <= hi + 1e-12);
        prop_assert_eq!(s, bayesian_bootstrap(&values, 200, seed).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn each_known_feature_adds_one_sentence(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = SyntheticWorld::random_binary(n, &mut rng);
        let schema = world.schema();
        let record = &world.sample_cohort(1, seed)[0];
        let mut known = BTreeSet::new();
        let mut previous = render_vignette(record, &known, &schema).unwrap();
        prop_assert_eq!(&previous, "");
        for f in &schema.features {
            known.insert(f.name.clone());
            let text = render_vignette(record, &known, &schema).unwrap();
            let count = |s: &str| s.matches(". ").count() + usize::from(s.ends_with('.'));
            prop_assert_eq!(count(&text), count(&previous) + 1);
            previous = text;
        }
    }

    #[test]
    fn csv_round_trip(seed in any::<u64>(), n in 1usize..5, patients in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = SyntheticWorld::random_binary(n, &mut rng);
        let schema = world.schema();
        let records = world.sample_cohort(patients, seed);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &schema, &records).unwrap();
        let loaded = load_dataset(buf.as_slice(), &schema).unwrap();
        prop_assert!(loaded.dropped.is_empty());
        prop_assert_eq!(loaded.records, records);
    }

    #[test]
    fn engine_matches_bruteforce_when_exact(seed in any::<u64>(), n in 2usize..5) {
        use diagbed::engine::{Engine, SessionState};
        use diagbed::surrogate::SyntheticSurrogate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let world = SyntheticWorld::random_binary(n, &mut rng);
        let schema = world.schema();
        let engine = Engine::new(schema.clone(), StoppingPolicy::default(), Criterion::Kl, 1).unwrap();
        let surrogate = SyntheticSurrogate::new(world.clone(), true);
        let record = &world.sample_cohort(1, seed)[0];
        let session = SessionState::from_record(&schema, record).unwrap();
        let rec = engine.recommend(&session, &surrogate, seed).unwrap();
        let evidence = common::evidence_pairs(&session.evidence);
        prop_assert!((rec.prior - common::oracle_posterior(&world, &evidence)).abs() < 1e-9);
        for e in &rec.evaluations {
            let want = common::oracle_expected_kl(&world, &evidence, &e.feature);
            prop_assert!((e.expected_kl - want).abs() < 1e-9, "{}: {} vs {}", e.feature, e.expected_kl, want);
        }
    }
}

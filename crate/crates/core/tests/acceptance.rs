//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails for a reason not listed in `KNOWN_GAPS`.

// Oracle literals are kept at full printed precision.
#![allow(clippy::excessive_precision, clippy::approx_constant)]

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diagbed::belief::{entropy_bernoulli, kl_bernoulli, Belief, CostModel, StoppingPolicy};
use diagbed::dataset::{Dataset, Value};
use diagbed::engine::{
    replay_episode, run_episode, score_candidate, select_next, ChosenBy, Criterion, Engine, EpisodeRecord,
    EpisodeSpec, Method, SessionState,
};
use diagbed::harness::experiment::{run_experiment, ExperimentConfig};
use diagbed::harness::metrics::{
    bayesian_bootstrap, compute_classification_metrics, energy_distance_1d, wasserstein_1d,
};
use diagbed::surrogate::{
    Counted, OutcomeSample, ScriptedSurrogate, Surrogate, SyntheticSurrogate, SyntheticWorld,
};

use common::*;

// High-precision closed-form values (40-digit evaluation).
const KL_065_020: f64 = 0.476_788_247_007_506_20;
const KL_022_020: f64 = 0.001_220_349_329_205_37;
const E_CREATININE: f64 = 0.239_004_298_168_355_78;
const E_SODIUM: f64 = 0.080_060_124_805_133_98;
const LN2: f64 = 0.693_147_180_559_945_31;

/// Criteria whose stated target cannot be reached by a faithful
/// implementation, with the reason printed next to the failure.
const KNOWN_GAPS: &[(u32, &str)] = &[(
    6,
    "the stated 280 assumes N=4 candidates at every one of 3 steps; acquired tests leave the \
     pool at 4, 3, 2, so a faithful episode issues 220 queries (within the 280 worst case)",
)];

type Outcome = Result<String, String>;
type Check = (u32, &'static str, fn() -> Outcome, Duration);

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn criterion_1() -> Outcome {
    let kl1 = kl_bernoulli(0.65, 0.20);
    let kl2 = kl_bernoulli(0.22, 0.20);
    let h = entropy_bernoulli(0.5);
    let detail = format!("kl(0.65,0.20)={kl1:.9} kl(0.22,0.20)={kl2:.9} H(0.5)={h:.9}");
    if close(kl1, KL_065_020, 1e-6) && close(kl2, KL_022_020, 1e-6) && close(h, LN2, 1e-6) {
        Ok(detail)
    } else {
        Err(format!("{detail}; expected {KL_065_020:.9}, {KL_022_020:.9}, {LN2:.9}"))
    }
}

fn sample(feature: &str, v: f64) -> OutcomeSample {
    OutcomeSample {
        feature: feature.into(),
        value: Value::Number(v),
        raw_response: String::new(),
        weight: 1.0,
    }
}

fn criterion_2() -> Outcome {
    let prior = Belief::new(0.2).unwrap();
    let costs = CostModel::uniform();
    let rows = vec![
        score_candidate(
            "sodium",
            vec![sample("sodium", 131.0), sample("sodium", 140.0)],
            vec![0.45, 0.18],
            prior,
            &costs,
        )
        .unwrap(),
        score_candidate(
            "creatinine",
            vec![sample("creatinine", 2.7), sample("creatinine", 1.0)],
            vec![0.65, 0.22],
            prior,
            &costs,
        )
        .unwrap(),
    ];
    let chosen = select_next(&rows, Criterion::Kl).map_err(|e| e.to_string())?;
    let (sod, crea) = (rows[0].expected_kl, rows[1].expected_kl);
    let detail = format!("E[KL] creatinine={crea:.9} sodium={sod:.9} selected={chosen}");
    if close(crea, E_CREATININE, 1e-6) && close(sod, E_SODIUM, 1e-6) && crea > sod && chosen == "creatinine" {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn accuracy(episodes: &[EpisodeRecord]) -> f64 {
    let labels: Vec<u8> = episodes.iter().map(|e| e.label).collect();
    let risks: Vec<f64> = episodes.iter().map(|e| e.final_risk.unwrap_or(f64::NAN)).collect();
    compute_classification_metrics(&labels, &risks, 0.5).unwrap().accuracy
}

fn criterion_3() -> Outcome {
    let schema = pathology_schema();
    let surrogate = pathology_surrogate();
    let policy = StoppingPolicy::new(0.5, 0.5).unwrap();
    let engine = Engine::new(schema.clone(), policy, Criterion::Kl, 2).unwrap();

    // single constructed instance
    let cohort = pathology_cohort(200, 11);
    let session = SessionState::from_record(&schema, &cohort[0]).map_err(|e| e.to_string())?;
    let rec = engine.recommend(&session, &surrogate, 0).map_err(|e| e.to_string())?;
    let kl_pick = select_next(&rec.evaluations, Criterion::Kl).map_err(|e| e.to_string())?;
    let entropy_pick = select_next(&rec.evaluations, Criterion::Entropy).map_err(|e| e.to_string())?;

    let run = |method: Method| -> Result<Vec<EpisodeRecord>, String> {
        cohort
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let spec = EpisodeSpec {
                    early_stop: false,
                    stream: i,
                    ..EpisodeSpec::new(method, 1, 3)
                };
                run_episode(&engine, r, &spec, &surrogate).map_err(|e| e.to_string())
            })
            .collect()
    };
    let kl_acc = accuracy(&run(Method::Actmed)?);
    let ent_acc = accuracy(&run(Method::ActmedEntropy)?);
    let detail = format!(
        "instance: kl picks {kl_pick}, entropy picks {entropy_pick}; cohort accuracy actmed={kl_acc:.3} \
         actmed-entropy={ent_acc:.3} (gap {:.1} pp)",
        100.0 * (kl_acc - ent_acc)
    );
    if kl_pick == "A" && entropy_pick != "A" && kl_acc - ent_acc >= 0.10 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Fraction of steps where the engine's argmax equals the brute-force one.
fn oracle_agreement(exact: bool, m: usize) -> Result<(usize, usize), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut agree, mut steps) = (0, 0);
    for w in 0..50 {
        let world = SyntheticWorld::random_binary(2 + w % 3, &mut rng);
        let schema = world.schema();
        let surrogate = SyntheticSurrogate::new(world.clone(), exact);
        let engine = Engine::new(schema.clone(), StoppingPolicy::new(0.5, 0.0).unwrap(), Criterion::Kl, m)
            .map_err(|e| e.to_string())?;
        for (e, patient) in world.sample_cohort(10, rng.random()).iter().enumerate() {
            let mut session = SessionState::from_record(&schema, patient).map_err(|e| e.to_string())?;
            while session.unknown.len() >= 2 {
                let seed = (w * 10 + e) as u64;
                let rec = engine.recommend(&session, &surrogate, seed).map_err(|e| e.to_string())?;
                let evidence = evidence_pairs(&session.evidence);
                let oracle = session
                    .unknown
                    .iter()
                    .map(|f| (f.clone(), oracle_expected_kl(&world, &evidence, f)))
                    .fold(None::<(String, f64)>, |best, (f, v)| match best {
                        Some((_, b)) if b >= v => best,
                        _ => Some((f, v)),
                    })
                    .unwrap()
                    .0;
                let chosen = rec.best.clone().ok_or("no evaluable candidates")?;
                steps += 1;
                agree += usize::from(chosen == oracle);
                let value = patient.values[&chosen].clone();
                session
                    .apply_result(&schema, &chosen, value, ChosenBy::Criterion, Some(rec))
                    .map_err(|e| e.to_string())?;
            }
        }
    }
    Ok((agree, steps))
}

fn criterion_4() -> Outcome {
    let (exact_agree, exact_steps) = oracle_agreement(true, 1)?;
    let (mc_agree, mc_steps) = oracle_agreement(false, 200)?;
    let mc_rate = mc_agree as f64 / mc_steps as f64;
    let detail = format!(
        "exact {exact_agree}/{exact_steps} steps, Monte Carlo M=200 {mc_agree}/{mc_steps} ({:.1}%)",
        100.0 * mc_rate
    );
    if exact_agree == exact_steps && mc_rate >= 0.95 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_5() -> Outcome {
    let world = graded_world();
    let schema = world.schema();
    let cohort = world.sample_cohort(200, 5);
    let tables = world.to_scripted(&cohort, 10, 5);
    let surrogate = ScriptedSurrogate::new(tables, schema.clone(), 10);
    let mut means = Vec::new();
    for gamma in [0.3, 0.5, 0.7] {
        let engine = Engine::new(schema.clone(), StoppingPolicy::new(0.5, gamma).unwrap(), Criterion::Kl, 10)
            .map_err(|e| e.to_string())?;
        let mut total = 0usize;
        for (i, r) in cohort.iter().enumerate() {
            let spec = EpisodeSpec {
                stream: i,
                ..EpisodeSpec::new(Method::Actmed, 3, 0)
            };
            let e = run_episode(&engine, r, &spec, &surrogate).map_err(|e| e.to_string())?;
            if e.is_failed() {
                return Err(format!("episode {} failed: {:?}", r.id, e.error));
            }
            total += e.acquired.len();
        }
        means.push(total as f64 / cohort.len() as f64);
    }
    let detail = format!(
        "mean tests per patient at gamma 0.3/0.5/0.7 = {:.3}/{:.3}/{:.3}",
        means[0], means[1], means[2]
    );
    if means[0] >= means[1] && means[1] >= means[2] && means[2] < 3.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    let world = graded_world();
    let mut schema = world.schema();
    schema.features.truncate(4);
    let mut world4 = world.clone();
    world4.features.truncate(4);
    let surrogate = SyntheticSurrogate::new(world4.clone(), false);
    let engine = Engine::new(schema.clone(), StoppingPolicy::new(0.5, 0.5).unwrap(), Criterion::Kl, 10)
        .map_err(|e| e.to_string())?;
    let patient = &world4.sample_cohort(1, 9)[0];
    let spec = EpisodeSpec {
        early_stop: false,
        ..EpisodeSpec::new(Method::Actmed, 3, 0)
    };
    let counted = Counted::new(&surrogate);
    let e = run_episode(&engine, patient, &spec, &counted).map_err(|e| e.to_string())?;
    let q = counted.queries();
    let pool: Vec<usize> = e.steps.iter().map(|s| s.evaluations.len()).collect();
    // exact count from the per-step candidate pools
    let exact = pool.len() * 10 + pool.iter().map(|n| 2 * n * 10).sum::<usize>() + 10;
    let detail = format!(
        "counted {} (risk {}, outcome {}); pools {:?}; sum-over-steps count {exact}; stated 280",
        q.total(),
        q.risk,
        q.outcome,
        pool
    );
    if q != e.queries || q.total() != exact as u64 || q.total() > 3 * 4 * 10 * 2 + 3 * 10 + 10 {
        return Err(format!("{detail}; counter disagrees with the per-step count"));
    }
    if q.total() == 280 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_7() -> Outcome {
    const VIGNETTE: &str = "The patient is 63 years old. The patient's diastolic blood pressure is 70 mm/Hg. \
The patient has a poor appetite. The patient has pedal oedema. The patient has hypertension. \
The patient has diabetes mellitus. The patient does not have coronary artery disease. \
The patient does not have anaemia. Specific gravity was measured at 1.01. \
Albumin levels in urine was measured at 3.0. Sugar levels in urine was measured at 0.0. \
Blood glucose random was measured at 380.0 mg/dL. Blood urea was measured at 60.0 mg/dL. \
Serum creatinine was measured at 2.7 mg/dL. Sodium levels was measured at 131.0 mEq/L. \
Potassium levels was measured at 4.2 mEq/L. Haemoglobin levels was measured at 10.8 g/dL. \
Packed cell volume was measured at 32.0.";
    let dataset = Dataset::from_manifest(&repo_path("datasets/ckd.toml")).map_err(|e| e.to_string())?;
    let record = dataset.record("table8").ok_or("record table8 missing")?;
    let text = record
        .evidence(dataset.schema.features.iter().map(|f| f.name.as_str()))
        .map_err(|e| e.to_string())?
        .render(&dataset.schema);
    if text == VIGNETTE {
        Ok(format!("{} bytes identical", text.len()))
    } else {
        Err(format!("rendered: {text}"))
    }
}

fn criterion_8() -> Outcome {
    // (labels, risks, accuracy, precision, recall, f1, auc), threshold 0.5
    let cohorts: [(&[u8], &[f64], [f64; 5]); 5] = [
        (&[1, 1, 0, 0], &[0.9, 0.6, 0.4, 0.1], [1.0, 1.0, 1.0, 1.0, 1.0]),
        (&[1, 0, 1, 0], &[0.8, 0.7, 0.3, 0.2], [0.5, 0.5, 0.5, 0.5, 0.75]),
        (
            &[1, 0, 1, 0, 1],
            &[0.5, 0.5, 0.9, 0.1, 0.2],
            [0.6, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 0.75],
        ),
        (&[1, 0, 0, 0], &[0.4, 0.3, 0.2, 0.1], [0.75, 0.0, 0.0, 0.0, 1.0]),
        (
            &[0, 0, 1, 1, 1, 0],
            &[0.9, 0.8, 0.2, 0.6, 0.1, 0.3],
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 9.0],
        ),
    ];
    for (i, (labels, risks, want)) in cohorts.iter().enumerate() {
        let m = compute_classification_metrics(labels, risks, 0.5).map_err(|e| e.to_string())?;
        let got = [m.accuracy, m.precision, m.recall, m.f1, m.auc.unwrap_or(f64::NAN)];
        if got.iter().zip(want).any(|(g, w)| !close(*g, *w, 1e-9)) {
            return Err(format!("cohort {i}: got {got:?}, want {want:?}"));
        }
    }
    let distances = [
        (vec![0.0], vec![1.0], 1.0, 2f64.sqrt()),
        (vec![0.0, 1.0], vec![0.5, 1.5], 0.5, 0.5f64.sqrt()),
        (vec![0.0, 1.0, 2.0, 3.0], vec![0.5, 1.5, 2.5, 3.5], 0.5, 0.5),
        (vec![0.0, 1.0], vec![0.0, 1.0], 0.0, 0.0),
    ];
    for (a, b, w, e) in &distances {
        let gw = wasserstein_1d(a, b).map_err(|e| e.to_string())?;
        let ge = energy_distance_1d(a, b).map_err(|e| e.to_string())?;
        if !close(gw, *w, 1e-9) || !close(ge, *e, 1e-9) {
            return Err(format!("{a:?} vs {b:?}: W={gw} (want {w}), energy={ge} (want {e})"));
        }
    }
    Ok("5 cohorts and 4 distance cases exact to 1e-9".into())
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let cohorts = 500;
    let mut covered = 0;
    for c in 0..cohorts {
        let values: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let s = bayesian_bootstrap(&values, 1000, c).map_err(|e| e.to_string())?;
        covered += usize::from(s.lower <= 0.5 && 0.5 <= s.upper);
    }
    let rate = covered as f64 / cohorts as f64;
    let detail = format!("{covered}/{cohorts} intervals cover the true mean ({:.1}%)", 100.0 * rate);
    if (0.92..=0.98).contains(&rate) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn replay_run() -> Result<Vec<EpisodeRecord>, String> {
    let world = graded_world();
    let schema = world.schema();
    let dataset = Dataset {
        name: "graded".into(),
        schema,
        records: world.sample_cohort(30, 17),
        dropped: Vec::new(),
    };
    let mut config: ExperimentConfig = toml::from_str(
        r#"
        dataset = "graded.toml"
        methods = ["actmed", "random"]
        budget = 3
        gammas = [0.3, 0.7]
        seeds = [0, 1]
        m = 10
        bootstrap_draws = 0
        [surrogate]
        kind = "synthetic"
        "#,
    )
    .map_err(|e| e.to_string())?;
    config.workers = Some(4);
    let surrogate = SyntheticSurrogate::new(world, false);
    Ok(run_experiment(&config, &dataset, &surrogate).map_err(|e| e.to_string())?.episodes)
}

fn criterion_10() -> Outcome {
    let first = replay_run()?;
    let second = replay_run()?;
    let bytes = |e: &[EpisodeRecord]| serde_json::to_vec(e).unwrap();
    if bytes(&first) != bytes(&second) {
        return Err("two runs with equal seeds serialized differently".into());
    }
    let schema = graded_world().schema();
    let mut replayed = 0;
    for e in &first {
        if !e.method.is_actmed() {
            continue;
        }
        let archived = serde_json::to_vec(e).unwrap();
        let restored: EpisodeRecord = serde_json::from_slice(&archived).map_err(|e| e.to_string())?;
        let engine = Engine::new(
            schema.clone(),
            StoppingPolicy::new(e.theta, e.gamma).unwrap(),
            e.method.criterion(),
            e.m,
        )
        .map_err(|e| e.to_string())?;
        let rebuilt = replay_episode(&engine, &restored).map_err(|m| format!("{}: {m}", e.patient_id))?;
        if serde_json::to_vec(&rebuilt).unwrap() != archived {
            return Err(format!("{}: replayed record differs", e.patient_id));
        }
        replayed += 1;
    }
    let steps: BTreeSet<usize> = first.iter().map(|e| e.steps.len()).collect();
    Ok(format!(
        "{} episodes identical across runs; {replayed} actmed trajectories replayed byte-identically (step counts {steps:?})",
        first.len()
    ))
}

fn main() {
    let criteria: [Check; 10] = [
        (1, "closed-form KL/entropy", criterion_1, Duration::from_secs(1)),
        (2, "expected-KL ordering", criterion_2, Duration::from_secs(1)),
        (3, "entropy pathology", criterion_3, Duration::from_secs(30)),
        (4, "oracle equivalence", criterion_4, Duration::from_secs(120)),
        (5, "gamma monotonicity", criterion_5, Duration::from_secs(60)),
        (6, "query accounting", criterion_6, Duration::from_secs(5)),
        (7, "vignette golden", criterion_7, Duration::from_secs(1)),
        (8, "metrics oracle", criterion_8, Duration::from_secs(60)),
        (9, "bootstrap coverage", criterion_9, Duration::from_secs(60)),
        (10, "replay determinism", criterion_10, Duration::from_secs(120)),
    ];
    let mut unexpected = 0;
    let mut passed = 0;
    for (id, name, check, limit) in criteria {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {elapsed:?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => {
                passed += 1;
                println!("PASS criterion {id:>2} {name}: {detail} [{:.0?}]", elapsed);
            }
            Err(detail) => {
                let known = KNOWN_GAPS.iter().find(|(k, _)| *k == id);
                println!("FAIL criterion {id:>2} {name}: {detail} [{:.0?}]", elapsed);
                match known {
                    Some((_, why)) => println!("     known gap: {why}"),
                    None => unexpected += 1,
                }
            }
        }
    }
    println!("acceptance: {passed}/10 passed, {unexpected} unexpected failures");
    if unexpected > 0 {
        std::process::exit(1);
    }
}

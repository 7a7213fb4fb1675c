#![allow(dead_code)]

use std::path::PathBuf;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use diagbed::dataset::{DatasetSchema, Evidence, FeatureSpec, PatientRecord, Value};
use diagbed::surrogate::{ScriptedSurrogate, ScriptedTables, SyntheticWorld, WILDCARD};

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Plain closed-form Bernoulli KL, independent of the library.
pub fn kl(q: f64, p: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    term(q, p) + term(1.0 - q, 1.0 - p)
}

/// P(disease | evidence) by direct Bayes over the world tables.
pub fn oracle_posterior(world: &SyntheticWorld, evidence: &[(String, String)]) -> f64 {
    let mut sick = world.prior_disease_rate;
    let mut healthy = 1.0 - world.prior_disease_rate;
    for (name, outcome) in evidence {
        let f = world.features.iter().find(|f| &f.name == name).unwrap();
        let i = f.outcomes.iter().position(|o| o == outcome).unwrap();
        sick *= f.given_disease[i];
        healthy *= f.given_healthy[i];
    }
    sick / (sick + healthy)
}

/// Exact expected KL of acquiring `feature` by enumerating its outcomes.
pub fn oracle_expected_kl(world: &SyntheticWorld, evidence: &[(String, String)], feature: &str) -> f64 {
    let prior = oracle_posterior(world, evidence);
    let f = world.features.iter().find(|f| f.name == feature).unwrap();
    f.outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let p_outcome = prior * f.given_disease[i] + (1.0 - prior) * f.given_healthy[i];
            let mut extended = evidence.to_vec();
            extended.push((feature.to_string(), o.clone()));
            p_outcome * kl(oracle_posterior(world, &extended), prior)
        })
        .sum()
}

pub fn evidence_pairs(evidence: &Evidence) -> Vec<(String, String)> {
    evidence.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Two tests, prior 0.1. `A` moves the posterior to 0.6 half the time and
/// otherwise leaves it at 0.1; `B` never moves it.
pub fn pathology_schema() -> DatasetSchema {
    DatasetSchema {
        disease_name: "the condition".into(),
        context_preamble: String::new(),
        label_column: "label".into(),
        id_column: Some("id".into()),
        disease_column: None,
        positive_labels: vec![],
        negative_labels: vec![],
        prompt_family: None,
        specialist: None,
        features: vec![
            FeatureSpec::categorical("A", "Test A is {value}.", &["pos", "neg"]),
            FeatureSpec::categorical("B", "Test B is {value}.", &["lo", "hi"]),
        ],
    }
}

pub fn pathology_surrogate() -> ScriptedSurrogate {
    let mut t = ScriptedTables::new();
    t.add_sample(WILDCARD, "A", "pos")
        .add_sample(WILDCARD, "A", "neg")
        .add_sample(WILDCARD, "B", "lo")
        .add_sample(WILDCARD, "B", "hi")
        .add_risk(WILDCARD, "-", 0.1)
        .add_risk(WILDCARD, "A=pos", 0.6)
        .add_risk(WILDCARD, "A=neg", 0.1)
        .add_risk(WILDCARD, "B=lo", 0.1)
        .add_risk(WILDCARD, "B=hi", 0.1);
    ScriptedSurrogate::new(t, pathology_schema(), 2)
}

/// Label ~ Bern(0.3); A agrees with the label 90% of the time, B is noise.
pub fn pathology_cohort(n: usize, seed: u64) -> Vec<PatientRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = u8::from(rng.random_bool(0.3));
            let a_pos = rng.random_bool(if label == 1 { 0.9 } else { 0.1 });
            let b_lo = rng.random_bool(0.5);
            let values: IndexMap<String, Value> = [
                ("A".to_string(), Value::Category(if a_pos { "pos" } else { "neg" }.into())),
                ("B".to_string(), Value::Category(if b_lo { "lo" } else { "hi" }.into())),
            ]
            .into_iter()
            .collect();
            PatientRecord {
                id: format!("p{i}"),
                values,
                label,
                disease: None,
                source_text: IndexMap::new(),
            }
        })
        .collect()
}

/// Five binary tests of decreasing strength.
pub fn graded_world() -> SyntheticWorld {
    let text = r#"
        prior_disease_rate = 0.33
        [[features]]
        name = "t1"
        outcomes = ["pos", "neg"]
        given_disease = [0.8, 0.2]
        given_healthy = [0.2, 0.8]
        [[features]]
        name = "t2"
        outcomes = ["pos", "neg"]
        given_disease = [0.75, 0.25]
        given_healthy = [0.3, 0.7]
        [[features]]
        name = "t3"
        outcomes = ["pos", "neg"]
        given_disease = [0.7, 0.3]
        given_healthy = [0.35, 0.65]
        [[features]]
        name = "t4"
        outcomes = ["pos", "neg"]
        given_disease = [0.65, 0.35]
        given_healthy = [0.4, 0.6]
        [[features]]
        name = "t5"
        outcomes = ["pos", "neg"]
        given_disease = [0.6, 0.4]
        given_healthy = [0.45, 0.55]
    "#;
    let world: SyntheticWorld = toml::from_str(text).unwrap();
    world.validate().unwrap();
    world
}

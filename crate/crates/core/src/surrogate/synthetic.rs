//! Analytic synthetic world: a disease prior and per-feature discrete
//! likelihoods, conditionally independent given disease status. Posteriors
//! are exact, which makes this backend an oracle for the selection loop.

use std::path::Path;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::belief::kl_bernoulli;
use crate::dataset::{DatasetSchema, Evidence, FeatureSpec, PatientRecord, Value};

use super::scripted::{ScriptedTables, WILDCARD};
use super::{Context, OutcomeSample, QueryCounter, Surrogate, SurrogateError};

const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFeature {
    pub name: String,
    pub outcomes: Vec<String>,
    /// `P(outcome | disease)`, aligned with `outcomes`.
    pub given_disease: Vec<f64>,
    /// `P(outcome | healthy)`, aligned with `outcomes`.
    pub given_healthy: Vec<f64>,
    #[serde(default)]
    pub known_at_start: bool,
}

impl SyntheticFeature {
    fn likelihood(&self, outcome: &str) -> Option<(f64, f64)> {
        let i = self.outcomes.iter().position(|o| o == outcome)?;
        Some((self.given_disease[i], self.given_healthy[i]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub prior_disease_rate: f64,
    pub features: Vec<SyntheticFeature>,
}

impl SyntheticWorld {
    pub fn validate(&self) -> Result<(), SurrogateError> {
        let bad = |msg: String| Err(SurrogateError::Config(msg));
        if !(0.0..=1.0).contains(&self.prior_disease_rate) {
            return bad(format!("prior {} outside [0, 1]", self.prior_disease_rate));
        }
        for f in &self.features {
            let n = f.outcomes.len();
            if n == 0 || f.given_disease.len() != n || f.given_healthy.len() != n {
                return bad(format!("feature `{}` has mismatched outcome tables", f.name));
            }
            for table in [&f.given_disease, &f.given_healthy] {
                if table.iter().any(|p| !(0.0..=1.0).contains(p))
                    || (table.iter().sum::<f64>() - 1.0).abs() > SUM_TOLERANCE
                {
                    return bad(format!("feature `{}` has a table not summing to 1", f.name));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SurrogateError::Config(format!("{}: {e}", path.display())))?;
        let world: Self = toml::from_str(&text)
            .map_err(|e| SurrogateError::Config(format!("{}: {e}", path.display())))?;
        world.validate()?;
        Ok(world)
    }

    /// Random world with `n` binary features (`pos`/`neg`).
    pub fn random_binary(n: usize, rng: &mut impl Rng) -> Self {
        let features = (0..n)
            .map(|i| {
                let sick: f64 = rng.random_range(0.05..0.95);
                let healthy: f64 = rng.random_range(0.05..0.95);
                SyntheticFeature {
                    name: format!("T{i}"),
                    outcomes: vec!["pos".into(), "neg".into()],
                    given_disease: vec![sick, 1.0 - sick],
                    given_healthy: vec![healthy, 1.0 - healthy],
                    known_at_start: false,
                }
            })
            .collect();
        Self {
            prior_disease_rate: rng.random_range(0.2..0.8),
            features,
        }
    }

    pub fn feature(&self, name: &str) -> Option<&SyntheticFeature> {
        self.features.iter().find(|f| f.name == name)
    }

    /// `P(disease | evidence)` by enumeration over disease status.
    pub fn posterior(&self, evidence: &Evidence) -> Result<f64, SurrogateError> {
        let mut sick = self.prior_disease_rate;
        let mut healthy = 1.0 - self.prior_disease_rate;
        for (name, value) in evidence.iter() {
            let feature = self
                .feature(name)
                .ok_or_else(|| SurrogateError::UnknownFeature(name.to_string()))?;
            let outcome = value.to_string();
            let (ls, lh) = feature
                .likelihood(&outcome)
                .ok_or_else(|| SurrogateError::UnparseableSample {
                    feature: name.to_string(),
                    raw: outcome.clone(),
                })?;
            sick *= ls;
            healthy *= lh;
        }
        let total = sick + healthy;
        if total <= 0.0 {
            return Err(SurrogateError::MissingEntry(format!(
                "evidence `{}` has zero probability",
                evidence.canonical_key()
            )));
        }
        Ok(sick / total)
    }

    /// `P(outcome | evidence)` for every outcome of `feature`.
    pub fn outcome_distribution(
        &self,
        evidence: &Evidence,
        feature: &str,
    ) -> Result<Vec<(String, f64)>, SurrogateError> {
        let f = self
            .feature(feature)
            .ok_or_else(|| SurrogateError::UnknownFeature(feature.to_string()))?;
        let post = self.posterior(evidence)?;
        Ok(f.outcomes
            .iter()
            .zip(f.given_disease.iter().zip(&f.given_healthy))
            .map(|(o, (s, h))| (o.clone(), post * s + (1.0 - post) * h))
            .collect())
    }

    /// Exact expected `KL(posterior || prior)` from acquiring `feature`.
    pub fn exact_expected_kl(&self, evidence: &Evidence, feature: &str) -> Result<f64, SurrogateError> {
        let prior = self.posterior(evidence)?;
        let mut total = 0.0;
        for (outcome, weight) in self.outcome_distribution(evidence, feature)? {
            if weight > 0.0 {
                let post = self.posterior(&evidence.with(feature, Value::Category(outcome)))?;
                total += weight * kl_bernoulli(post, prior);
            }
        }
        Ok(total)
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            disease_name: "synthetic condition".into(),
            context_preamble: String::new(),
            label_column: "label".into(),
            id_column: Some("id".into()),
            disease_column: None,
            positive_labels: vec![],
            negative_labels: vec![],
            prompt_family: None,
            specialist: None,
            features: self
                .features
                .iter()
                .map(|f| {
                    let outcomes: Vec<&str> = f.outcomes.iter().map(String::as_str).collect();
                    let mut spec = FeatureSpec::categorical(
                        &f.name,
                        &format!("The {} result is {{value}}.", f.name),
                        &outcomes,
                    );
                    spec.known_at_start = f.known_at_start;
                    spec
                })
                .collect(),
        }
    }

    pub fn sample_patient(&self, id: &str, rng: &mut impl Rng) -> PatientRecord {
        let label = u8::from(rng.random_bool(self.prior_disease_rate));
        let values: IndexMap<String, Value> = self
            .features
            .iter()
            .map(|f| {
                let table = if label == 1 { &f.given_disease } else { &f.given_healthy };
                let i = draw_index(table, rng);
                (f.name.clone(), Value::Category(f.outcomes[i].clone()))
            })
            .collect();
        PatientRecord {
            id: id.to_string(),
            values,
            label,
            disease: None,
            source_text: IndexMap::new(),
        }
    }

    pub fn sample_cohort(&self, n: usize, seed: u64) -> Vec<PatientRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| self.sample_patient(&format!("w{i}"), &mut rng))
            .collect()
    }

    /// Freezes this world into scripted tables: `m` evidence-free outcome
    /// draws per patient and feature, and exact risks for every partial
    /// assignment of feature values.
    pub fn to_scripted(&self, patients: &[PatientRecord], m: usize, seed: u64) -> ScriptedTables {
        let mut tables = ScriptedTables::new();
        let empty = Evidence::new();
        for (p, patient) in patients.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for f in &self.features {
                let dist: Vec<f64> = self
                    .outcome_distribution(&empty, &f.name)
                    .expect("feature belongs to world")
                    .into_iter()
                    .map(|(_, w)| w)
                    .collect();
                for _ in 0..m {
                    tables.add_sample(&patient.id, &f.name, &f.outcomes[draw_index(&dist, &mut rng)]);
                }
            }
        }
        let mut assignments = vec![Evidence::new()];
        for f in &self.features {
            let mut next = Vec::with_capacity(assignments.len() * (f.outcomes.len() + 1));
            for partial in &assignments {
                next.push(partial.clone());
                for outcome in &f.outcomes {
                    next.push(partial.with(&f.name, Value::Category(outcome.clone())));
                }
            }
            assignments = next;
        }
        for evidence in assignments {
            if let Ok(p) = self.posterior(&evidence) {
                tables.add_risk(WILDCARD, &evidence.canonical_key(), p);
            }
        }
        tables
    }
}

fn draw_index(weights: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

pub struct SyntheticSurrogate {
    world: SyntheticWorld,
    exact: bool,
    counter: QueryCounter,
}

impl SyntheticSurrogate {
    /// With `exact`, `sample_outcomes` enumerates the outcome support with
    /// probability weights instead of drawing `m` samples.
    pub fn new(world: SyntheticWorld, exact: bool) -> Self {
        Self {
            world,
            exact,
            counter: QueryCounter::default(),
        }
    }

    pub fn world(&self) -> &SyntheticWorld {
        &self.world
    }

    fn ranked(&self, evidence: &Evidence, names: &[String]) -> Result<Vec<(String, f64)>, SurrogateError> {
        let mut scored = names
            .iter()
            .map(|n| Ok((n.clone(), self.world.exact_expected_kl(evidence, n)?)))
            .collect::<Result<Vec<_>, SurrogateError>>()?;
        // stable: equal scores keep candidate order
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(scored)
    }
}

impl Surrogate for SyntheticSurrogate {
    fn sample_outcomes(
        &self,
        ctx: &Context<'_>,
        feature: &FeatureSpec,
        m: usize,
        seed: u64,
    ) -> Result<Vec<OutcomeSample>, SurrogateError> {
        self.counter.add_outcome(m as u64);
        let dist = self.world.outcome_distribution(ctx.evidence, &feature.name)?;
        if self.exact {
            return Ok(dist
                .into_iter()
                .filter(|(_, w)| *w > 0.0)
                .map(|(outcome, w)| OutcomeSample {
                    weight: w,
                    ..OutcomeSample::new(&feature.name, Value::Category(outcome.clone()), outcome)
                })
                .collect());
        }
        let weights: Vec<f64> = dist.iter().map(|(_, w)| *w).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..m)
            .map(|_| {
                let outcome = &dist[draw_index(&weights, &mut rng)].0;
                OutcomeSample::new(&feature.name, Value::Category(outcome.clone()), outcome.clone())
            })
            .collect())
    }

    fn estimate_risk(&self, ctx: &Context<'_>, _draw: usize) -> Result<f64, SurrogateError> {
        self.counter.add_risk(1);
        self.world.posterior(ctx.evidence)
    }

    fn implicit_select(&self, ctx: &Context<'_>, unknown: &[String]) -> Result<String, SurrogateError> {
        self.counter.add_selection(1);
        self.ranked(ctx.evidence, unknown)?
            .into_iter()
            .next()
            .map(|(n, _)| n)
            .ok_or_else(|| SurrogateError::InvalidSelection { raw: String::new() })
    }

    fn global_select(&self, all: &[String], n: usize) -> Result<Vec<String>, SurrogateError> {
        self.counter.add_selection(1);
        if n > all.len() {
            return Err(SurrogateError::MalformedList {
                raw: format!("asked for {n} of {} features", all.len()),
            });
        }
        Ok(self
            .ranked(&Evidence::new(), all)?
            .into_iter()
            .take(n)
            .map(|(name, _)| name)
            .collect())
    }

    fn counter(&self) -> &QueryCounter {
        &self.counter
    }
}

/// Convenience for tests and demos: evidence from `name=outcome` pairs.
pub fn evidence_of(pairs: &[(&str, &str)]) -> Evidence {
    let mut e = Evidence::new();
    for (k, v) in pairs {
        e.insert(k, Value::Category(v.to_string()), None);
    }
    e
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_test_world() -> SyntheticWorld {
        SyntheticWorld {
            prior_disease_rate: 0.5,
            features: vec![SyntheticFeature {
                name: "test".into(),
                outcomes: vec!["high".into(), "low".into()],
                given_disease: vec![0.9, 0.1],
                given_healthy: vec![0.1, 0.9],
                known_at_start: false,
            }],
        }
    }

    fn ctx(e: &Evidence) -> Context<'_> {
        Context {
            patient_id: "p",
            disease: "d",
            evidence: e,
            vignette: "",
        }
    }

    #[test]
    fn evidence_free_risk_is_prior() {
        let s = SyntheticSurrogate::new(one_test_world(), false);
        assert_eq!(s.estimate_risk(&ctx(&Evidence::new()), 0).unwrap(), 0.5);
    }

    #[test]
    fn bayes_update_on_high() {
        let s = SyntheticSurrogate::new(one_test_world(), false);
        let e = evidence_of(&[("test", "high")]);
        // 0.45 / 0.50
        assert!((s.estimate_risk(&ctx(&e), 0).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sampled_frequency_matches_mixture() {
        let world = one_test_world();
        let s = SyntheticSurrogate::new(world.clone(), false);
        let spec = &world.schema().features[0];
        let out = s.sample_outcomes(&ctx(&Evidence::new()), spec, 10_000, 11).unwrap();
        let high = out.iter().filter(|o| o.value == Value::Category("high".into())).count();
        let freq = high as f64 / 10_000.0;
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn exact_mode_enumerates_support() {
        let world = one_test_world();
        let s = SyntheticSurrogate::new(world.clone(), true);
        let spec = &world.schema().features[0];
        let out = s.sample_outcomes(&ctx(&Evidence::new()), spec, 10, 0).unwrap();
        assert_eq!(out.len(), 2);
        assert!((out.iter().map(|o| o.weight).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let world = SyntheticWorld::random_binary(3, &mut ChaCha8Rng::seed_from_u64(5));
        let s = SyntheticSurrogate::new(world.clone(), false);
        let spec = &world.schema().features[1];
        let a = s.sample_outcomes(&ctx(&Evidence::new()), spec, 50, 42).unwrap();
        let b = s.sample_outcomes(&ctx(&Evidence::new()), spec, 50, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_catches_bad_tables() {
        let mut w = one_test_world();
        w.features[0].given_disease = vec![0.9, 0.2];
        assert!(w.validate().is_err());
        let mut w = one_test_world();
        w.prior_disease_rate = 1.5;
        assert!(w.validate().is_err());
        assert!(one_test_world().validate().is_ok());
    }

    #[test]
    fn unknown_evidence_feature_errors() {
        let w = one_test_world();
        assert!(w.posterior(&evidence_of(&[("nope", "high")])).is_err());
        assert!(w.posterior(&evidence_of(&[("test", "medium")])).is_err());
    }

    #[test]
    fn scripted_compilation_reproduces_posteriors() {
        let world = SyntheticWorld::random_binary(3, &mut ChaCha8Rng::seed_from_u64(9));
        let patients = world.sample_cohort(4, 1);
        let tables = world.to_scripted(&patients, 5, 2);
        let scripted = super::super::ScriptedSurrogate::new(tables, world.schema(), 5);
        let e = evidence_of(&[("T0", "pos"), ("T2", "neg")]);
        let c = Context {
            patient_id: "w0",
            ..ctx(&e)
        };
        assert_eq!(
            scripted.estimate_risk(&c, 0).unwrap(),
            world.posterior(&e).unwrap()
        );
    }
}

//! Sequential test selection: candidate scoring, stopping, session state.

mod episode;

pub use episode::{replay_episode, run_episode, EpisodeRecord, EpisodeSpec, ReplayMismatch};

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::{
    self, expected_kl, expected_kl_weighted, entropy_eig, entropy_eig_weighted, stopping_threshold,
    Belief, BeliefError, CostModel, StoppingPolicy,
};
use crate::dataset::{DataError, DatasetSchema, Evidence, PatientRecord, Value};
use crate::surrogate::{Context, OutcomeSample, QueryCounts, Surrogate, SurrogateError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error("no evaluable candidates")]
    NoEvaluable,
    #[error("feature `{0}` is already known")]
    AlreadyKnown(String),
    #[error("feature `{0}` is not a candidate")]
    NotCandidate(String),
    #[error("session is {0}")]
    Inactive(Status),
    #[error("budget {budget} exceeds the {available} selectable features")]
    BudgetTooLarge { budget: usize, available: usize },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Actmed,
    ActmedEntropy,
    Random,
    Global,
    Implicit,
    AllFeatures,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Actmed,
        Method::ActmedEntropy,
        Method::Random,
        Method::Global,
        Method::Implicit,
        Method::AllFeatures,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Actmed => "actmed",
            Method::ActmedEntropy => "actmed-entropy",
            Method::Random => "random",
            Method::Global => "global",
            Method::Implicit => "implicit",
            Method::AllFeatures => "all-features",
        }
    }

    /// Methods that score candidates and honour the stopping rule.
    pub fn is_actmed(self) -> bool {
        matches!(self, Method::Actmed | Method::ActmedEntropy)
    }

    pub fn criterion(self) -> Criterion {
        match self {
            Method::ActmedEntropy => Criterion::Entropy,
            _ => Criterion::Kl,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Kl,
    Entropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChosenBy {
    Criterion,
    Override,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Active,
    StoppedByCriterion,
    BudgetExhausted,
    Diagnosed,
    Abandoned,
    Failed,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Active => "active",
            Status::StoppedByCriterion => "stopped-by-criterion",
            Status::BudgetExhausted => "budget-exhausted",
            Status::Diagnosed => "diagnosed",
            Status::Abandoned => "abandoned",
            Status::Failed => "failed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub feature: String,
    pub outcome_samples: Vec<OutcomeSample>,
    /// `posterior_draws[j]` conditions on `outcome_samples[j]`.
    pub posterior_draws: Vec<f64>,
    pub expected_kl: f64,
    pub entropy_eig: f64,
    pub utility: f64,
    /// Set when the candidate could not be scored; such rows never win.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl CandidateEvaluation {
    pub fn failed(feature: &str, reason: impl Into<String>) -> Self {
        Self {
            feature: feature.to_string(),
            outcome_samples: Vec::new(),
            posterior_draws: Vec::new(),
            expected_kl: 0.0,
            entropy_eig: 0.0,
            utility: 0.0,
            failure: Some(reason.into()),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.failure.is_none()
    }
}

/// Scores one candidate from its outcome samples and posterior draws.
pub fn score_candidate(
    feature: &str,
    outcome_samples: Vec<OutcomeSample>,
    posterior_draws: Vec<f64>,
    prior: Belief,
    costs: &CostModel,
) -> Result<CandidateEvaluation, BeliefError> {
    let weighted = outcome_samples.iter().any(|s| s.weight != 1.0);
    let (kl, eig) = if weighted {
        let w: Vec<f64> = outcome_samples.iter().map(|s| s.weight).collect();
        (
            expected_kl_weighted(&posterior_draws, &w, prior)?,
            entropy_eig_weighted(prior, &posterior_draws, &w)?,
        )
    } else {
        (
            expected_kl(&posterior_draws, prior)?,
            entropy_eig(prior, &posterior_draws)?,
        )
    };
    Ok(CandidateEvaluation {
        feature: feature.to_string(),
        utility: belief::utility(kl, feature, costs)?,
        outcome_samples,
        posterior_draws,
        expected_kl: kl,
        entropy_eig: eig,
        failure: None,
    })
}

/// Argmax by the criterion over successful rows; the first row wins ties.
pub fn select_next(
    evaluations: &[CandidateEvaluation],
    criterion: Criterion,
) -> Result<String, EngineError> {
    let score = |e: &CandidateEvaluation| match criterion {
        Criterion::Kl => e.utility,
        Criterion::Entropy => e.entropy_eig,
    };
    let mut best: Option<&CandidateEvaluation> = None;
    for e in evaluations.iter().filter(|e| e.is_ok()) {
        if best.is_none_or(|b| score(e) > score(b)) {
            best = Some(e);
        }
    }
    best.map(|e| e.feature.clone()).ok_or(EngineError::NoEvaluable)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopDecision {
    pub stop: bool,
    pub threshold: f64,
    pub best_expected_kl: Option<f64>,
}

pub fn check_stop(
    evaluations: &[CandidateEvaluation],
    prior: Belief,
    policy: &StoppingPolicy,
) -> StopDecision {
    let threshold = stopping_threshold(prior, policy);
    let best = evaluations
        .iter()
        .filter(|e| e.is_ok())
        .map(|e| e.expected_kl)
        .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))));
    StopDecision {
        stop: best.is_none_or(|b| b < threshold),
        threshold,
        best_expected_kl: best,
    }
}

/// Per-(seed, step, candidate) sampling seed.
pub fn mix_seed(seed: u64, step: usize, candidate: usize) -> u64 {
    let mut z = seed
        ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (candidate as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Evaluated state of one step, before a result is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub step_index: usize,
    pub prior: f64,
    pub prior_draws: Vec<f64>,
    pub evaluations: Vec<CandidateEvaluation>,
    /// Criterion argmax; absent when the stopping rule fires.
    pub recommended: Option<String>,
    /// Criterion argmax regardless of stopping.
    pub best: Option<String>,
    pub stop_threshold: f64,
    pub would_stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryStep {
    pub step_index: usize,
    pub prior_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prior_draws: Vec<f64>,
    pub evaluations: Vec<CandidateEvaluation>,
    pub chosen: Option<String>,
    pub chosen_by: Option<ChosenBy>,
    pub observed_value: Option<Value>,
    pub prior_after: Option<f64>,
    pub stop_threshold: Option<f64>,
}

/// Selection settings shared by every step of an episode or session.
#[derive(Debug, Clone)]
pub struct Engine {
    pub schema: DatasetSchema,
    pub costs: CostModel,
    pub policy: StoppingPolicy,
    pub criterion: Criterion,
    pub m: usize,
}

impl Engine {
    pub fn new(
        schema: DatasetSchema,
        policy: StoppingPolicy,
        criterion: Criterion,
        m: usize,
    ) -> Result<Self, EngineError> {
        policy.validate()?;
        if m == 0 {
            return Err(EngineError::Invalid("m must be >= 1".into()));
        }
        let costs = schema.cost_model()?;
        Ok(Self {
            schema,
            costs,
            policy,
            criterion,
            m,
        })
    }

    /// Mean of `m` risk queries on the current evidence, plus the draws.
    pub fn estimate_prior(
        &self,
        session: &SessionState,
        surrogate: &dyn Surrogate,
    ) -> Result<(Belief, Vec<f64>), EngineError> {
        let vignette = session.evidence.render(&self.schema);
        let ctx = session.context(&vignette);
        let draws = (0..self.m)
            .map(|j| surrogate.estimate_risk(&ctx, j))
            .collect::<Result<Vec<_>, _>>()?;
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        Ok((Belief::saturating(mean), draws))
    }

    /// Scores every unknown feature, concurrently, in schema order.
    pub fn evaluate_candidates(
        &self,
        session: &SessionState,
        prior: Belief,
        surrogate: &dyn Surrogate,
        seed: u64,
    ) -> Vec<CandidateEvaluation> {
        let step = session.trajectory.len();
        session
            .unknown
            .par_iter()
            .enumerate()
            .map(|(i, name)| {
                self.evaluate_one(session, name, prior, surrogate, mix_seed(seed, step, i))
                    .unwrap_or_else(|e| {
                        tracing::warn!(feature = %name, error = %e, "candidate evaluation failed");
                        CandidateEvaluation::failed(name, e.to_string())
                    })
            })
            .collect()
    }

    fn evaluate_one(
        &self,
        session: &SessionState,
        name: &str,
        prior: Belief,
        surrogate: &dyn Surrogate,
        seed: u64,
    ) -> Result<CandidateEvaluation, EngineError> {
        let feature = self
            .schema
            .feature(name)
            .ok_or_else(|| SurrogateError::UnknownFeature(name.to_string()))?;
        let vignette = session.evidence.render(&self.schema);
        let samples = surrogate.sample_outcomes(&session.context(&vignette), feature, self.m, seed)?;
        if samples.is_empty() {
            return Err(EngineError::Invalid(format!("no outcomes sampled for `{name}`")));
        }
        let posteriors = samples
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let evidence = session.evidence.with(name, s.value.clone());
                let vignette = evidence.render(&self.schema);
                let ctx = Context {
                    evidence: &evidence,
                    vignette: &vignette,
                    ..session.context("")
                };
                surrogate.estimate_risk(&ctx, j)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(score_candidate(name, samples, posteriors, prior, &self.costs)?)
    }

    /// Assembles a recommendation from a prior and its evaluations.
    pub fn recommend_from(
        &self,
        step_index: usize,
        prior: Belief,
        prior_draws: Vec<f64>,
        evaluations: Vec<CandidateEvaluation>,
    ) -> Recommendation {
        let decision = check_stop(&evaluations, prior, &self.policy);
        let best = select_next(&evaluations, self.criterion).ok();
        Recommendation {
            step_index,
            prior: prior.p(),
            prior_draws,
            recommended: if decision.stop { None } else { best.clone() },
            best,
            evaluations,
            stop_threshold: decision.threshold,
            would_stop: decision.stop,
        }
    }

    /// Prior, candidate evaluation, stopping check and selection for the
    /// session's current step.
    pub fn recommend(
        &self,
        session: &SessionState,
        surrogate: &dyn Surrogate,
        seed: u64,
    ) -> Result<Recommendation, EngineError> {
        if session.status != Status::Active {
            return Err(EngineError::Inactive(session.status));
        }
        let (prior, draws) = match session.prior_override.filter(|_| session.trajectory.is_empty()) {
            Some(p) => (Belief::new(p)?, Vec::new()),
            None => self.estimate_prior(session, surrogate)?,
        };
        let evaluations = self.evaluate_candidates(session, prior, surrogate, seed);
        Ok(self.recommend_from(session.trajectory.len(), prior, draws, evaluations))
    }
}

/// One diagnosis episode: what is known, what can still be acquired, and
/// the audit trail so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub patient_id: String,
    pub disease: String,
    pub evidence: Evidence,
    /// Known features: initial ones in schema order, then acquisitions.
    pub known: Vec<String>,
    /// Acquirable features in schema order.
    pub unknown: Vec<String>,
    pub initial_known: usize,
    pub prior: Option<f64>,
    /// Replaces the first step's estimated prior when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_override: Option<f64>,
    pub trajectory: Vec<TrajectoryStep>,
    pub status: Status,
    pub queries_used: QueryCounts,
}

impl SessionState {
    /// Starts from arbitrary known evidence. Features that start known in the
    /// schema but are absent from `evidence` are dropped from the episode.
    pub fn new(
        schema: &DatasetSchema,
        patient_id: &str,
        disease: &str,
        evidence: Evidence,
    ) -> Result<Self, EngineError> {
        for (name, value) in evidence.iter() {
            let spec = schema
                .feature(name)
                .ok_or_else(|| DataError::UnknownFeature(name.to_string()))?;
            spec.check_value(value)?;
        }
        let known: Vec<String> = schema
            .features
            .iter()
            .filter(|f| evidence.contains(&f.name))
            .map(|f| f.name.clone())
            .collect();
        let unknown = schema
            .features
            .iter()
            .filter(|f| !f.known_at_start && !evidence.contains(&f.name))
            .map(|f| f.name.clone())
            .collect();
        Ok(Self {
            patient_id: patient_id.to_string(),
            disease: disease.to_string(),
            initial_known: known.len(),
            evidence,
            known,
            unknown,
            prior: None,
            prior_override: None,
            trajectory: Vec::new(),
            status: Status::Active,
            queries_used: QueryCounts::default(),
        })
    }

    /// Session over a dataset record with the schema's known/unknown split.
    pub fn from_record(schema: &DatasetSchema, record: &PatientRecord) -> Result<Self, EngineError> {
        let (known, _) = schema.partition();
        let evidence = record.evidence(known.iter().map(String::as_str))?;
        let disease = record.disease.as_deref().unwrap_or(&schema.disease_name);
        Self::new(schema, &record.id, disease, evidence)
    }

    pub fn context<'a>(&'a self, vignette: &'a str) -> Context<'a> {
        Context {
            patient_id: &self.patient_id,
            disease: &self.disease,
            evidence: &self.evidence,
            vignette,
        }
    }

    pub fn acquired(&self) -> usize {
        self.known.len() - self.initial_known
    }

    /// Moves `feature` to the known set with `observed`, appending a step.
    /// `rec` is the recommendation the step was evaluated under, if any.
    pub fn apply_result(
        &mut self,
        schema: &DatasetSchema,
        feature: &str,
        observed: Value,
        chosen_by: ChosenBy,
        rec: Option<Recommendation>,
    ) -> Result<(), EngineError> {
        if self.status != Status::Active {
            return Err(EngineError::Inactive(self.status));
        }
        if self.evidence.contains(feature) {
            return Err(EngineError::AlreadyKnown(feature.to_string()));
        }
        let pos = self
            .unknown
            .iter()
            .position(|f| f == feature)
            .ok_or_else(|| EngineError::NotCandidate(feature.to_string()))?;
        let spec = schema
            .feature(feature)
            .ok_or_else(|| DataError::UnknownFeature(feature.to_string()))?;
        let value = spec.check_value(&observed)?;
        self.unknown.remove(pos);
        self.known.push(feature.to_string());
        self.evidence.insert(feature, value.clone(), None);
        let step_index = self.trajectory.len();
        let (prior_before, prior_draws, evaluations, threshold) = match rec {
            Some(r) => (Some(r.prior), r.prior_draws, r.evaluations, Some(r.stop_threshold)),
            None => (None, Vec::new(), Vec::new(), None),
        };
        if let Some(p) = prior_before {
            self.prior = Some(p);
        }
        self.trajectory.push(TrajectoryStep {
            step_index,
            prior_before,
            prior_draws,
            evaluations,
            chosen: Some(feature.to_string()),
            chosen_by: Some(chosen_by),
            observed_value: Some(value),
            prior_after: None,
            stop_threshold: threshold,
        });
        Ok(())
    }

    /// Records a terminal step for a stopping decision and closes the
    /// session.
    pub fn stop(&mut self, rec: Recommendation) {
        self.prior = Some(rec.prior);
        self.trajectory.push(TrajectoryStep {
            step_index: self.trajectory.len(),
            prior_before: Some(rec.prior),
            prior_draws: rec.prior_draws,
            evaluations: rec.evaluations,
            chosen: None,
            chosen_by: None,
            observed_value: None,
            prior_after: None,
            stop_threshold: Some(rec.stop_threshold),
        });
        self.status = Status::StoppedByCriterion;
    }

    /// Fills each acquiring step's `prior_after` from the next step's prior,
    /// and the last one from `final_risk`.
    pub fn backfill_priors(&mut self, final_risk: Option<f64>) {
        let n = self.trajectory.len();
        for i in 0..n {
            if self.trajectory[i].chosen.is_none() {
                continue;
            }
            let next = if i + 1 < n {
                self.trajectory[i + 1].prior_before
            } else {
                final_risk
            };
            if next.is_some() {
                self.trajectory[i].prior_after = next;
            }
        }
    }
}

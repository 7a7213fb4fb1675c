//! Whole episodes for every method, and replay from recorded draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::belief::Belief;
use crate::dataset::PatientRecord;
use crate::surrogate::{Counted, QueryCounts, Surrogate};

use super::{
    mix_seed, score_candidate, CandidateEvaluation, ChosenBy, Engine, EngineError, Method, SessionState,
    Status, TrajectoryStep,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub method: Method,
    pub budget: usize,
    /// Apply the stopping rule (actmed methods only).
    pub early_stop: bool,
    /// Experiment seed.
    pub seed: u64,
    /// Distinguishes episodes sharing a seed, usually the patient index.
    pub stream: usize,
    /// Experiment-level choice for [`Method::Global`]; queried per episode
    /// when absent.
    pub global_features: Option<Vec<String>>,
}

impl EpisodeSpec {
    pub fn episode_seed(&self) -> u64 {
        mix_seed(self.seed, self.stream, usize::MAX)
    }

    pub fn new(method: Method, budget: usize, seed: u64) -> Self {
        Self {
            method,
            budget,
            early_stop: true,
            seed,
            stream: 0,
            global_features: None,
        }
    }
}

/// Serialized audit record of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub patient_id: String,
    pub label: u8,
    pub method: Method,
    pub theta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub episode_seed: u64,
    pub m: usize,
    pub budget: usize,
    pub early_stop: bool,
    pub status: Status,
    pub initial_known: Vec<String>,
    pub steps: Vec<TrajectoryStep>,
    pub acquired: Vec<String>,
    pub final_draws: Vec<f64>,
    pub final_risk: Option<f64>,
    pub predicted: Option<u8>,
    pub queries: QueryCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl EpisodeRecord {
    pub fn is_failed(&self) -> bool {
        self.status == Status::Failed
    }
}

fn acquire(
    engine: &Engine,
    session: &mut SessionState,
    record: &PatientRecord,
    feature: &str,
    rec: Option<super::Recommendation>,
) -> Result<(), EngineError> {
    let value = record
        .values
        .get(feature)
        .cloned()
        .ok_or_else(|| EngineError::NotCandidate(feature.to_string()))?;
    session.apply_result(&engine.schema, feature, value, ChosenBy::Criterion, rec)
}

fn drive(
    engine: &Engine,
    session: &mut SessionState,
    record: &PatientRecord,
    spec: &EpisodeSpec,
    surrogate: &dyn Surrogate,
) -> Result<(), EngineError> {
    let budget = spec.budget;
    match spec.method {
        Method::Actmed | Method::ActmedEntropy => {
            while session.acquired() < budget && !session.unknown.is_empty() {
                let rec = engine.recommend(session, surrogate, spec.episode_seed())?;
                if spec.early_stop && rec.would_stop {
                    session.stop(rec);
                    return Ok(());
                }
                let chosen = rec.best.clone().ok_or(EngineError::NoEvaluable)?;
                acquire(engine, session, record, &chosen, Some(rec))?;
            }
        }
        Method::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.episode_seed());
            let picks: Vec<String> = rand::seq::index::sample(&mut rng, session.unknown.len(), budget)
                .iter()
                .map(|i| session.unknown[i].clone())
                .collect();
            for f in picks {
                acquire(engine, session, record, &f, None)?;
            }
        }
        Method::Global => {
            let picks = match &spec.global_features {
                Some(f) => f.clone(),
                None => surrogate.global_select(&session.unknown, budget)?,
            };
            for f in picks.iter().take(budget) {
                acquire(engine, session, record, f, None)?;
            }
        }
        Method::Implicit => {
            for _ in 0..budget {
                if session.unknown.is_empty() {
                    break;
                }
                let vignette = session.evidence.render(&engine.schema);
                let chosen = surrogate.implicit_select(&session.context(&vignette), &session.unknown)?;
                acquire(engine, session, record, &chosen, None)?;
            }
        }
        Method::AllFeatures => {
            session.evidence = record.evidence(engine.schema.features.iter().map(|f| f.name.as_str()))?;
            session.known = engine.schema.feature_names();
            session.initial_known = session.known.len();
            session.unknown.clear();
        }
    }
    session.status = Status::BudgetExhausted;
    Ok(())
}

/// Runs one patient through `spec.method`. Surrogate failures produce a
/// record with status `failed`; only invalid inputs return an error.
pub fn run_episode(
    engine: &Engine,
    record: &PatientRecord,
    spec: &EpisodeSpec,
    surrogate: &dyn Surrogate,
) -> Result<EpisodeRecord, EngineError> {
    let mut session = SessionState::from_record(&engine.schema, record)?;
    if spec.method != Method::AllFeatures && spec.budget > session.unknown.len() {
        return Err(EngineError::BudgetTooLarge {
            budget: spec.budget,
            available: session.unknown.len(),
        });
    }
    let local;
    let engine = if engine.criterion == spec.method.criterion() {
        engine
    } else {
        local = Engine {
            criterion: spec.method.criterion(),
            ..engine.clone()
        };
        &local
    };
    let initial_known = session.known.clone();
    let counted = Counted::new(surrogate);
    let outcome = drive(engine, &mut session, record, spec, &counted)
        .and_then(|()| engine.estimate_prior(&session, &counted));
    let (status, final_draws, final_risk, error) = match outcome {
        Ok((risk, draws)) => (session.status, draws, Some(risk.p()), None),
        Err(e) => {
            tracing::warn!(patient = %record.id, method = %spec.method, error = %e, "episode failed");
            (Status::Failed, Vec::new(), None, Some(e.to_string()))
        }
    };
    session.status = status;
    session.backfill_priors(final_risk);
    Ok(EpisodeRecord {
        patient_id: record.id.clone(),
        label: record.label,
        method: spec.method,
        theta: engine.policy.theta,
        gamma: engine.policy.gamma,
        seed: spec.seed,
        episode_seed: spec.episode_seed(),
        m: engine.m,
        budget: spec.budget,
        early_stop: spec.early_stop && spec.method.is_actmed(),
        status,
        acquired: session.known[session.initial_known.min(session.known.len())..].to_vec(),
        initial_known,
        steps: session.trajectory,
        final_draws,
        predicted: final_risk.map(|r| u8::from(r >= engine.policy.theta)),
        final_risk,
        queries: counted.queries(),
        error,
    })
}

#[derive(Debug, Error, PartialEq)]
#[error("replay diverged at step {step}: {what}")]
pub struct ReplayMismatch {
    pub step: usize,
    pub what: String,
}

fn mean_belief(draws: &[f64]) -> Belief {
    Belief::saturating(draws.iter().sum::<f64>() / draws.len() as f64)
}

/// Recomputes every belief, evaluation score, stopping decision and
/// recommendation of `episode` from its recorded draws, returning the
/// rebuilt record. Any disagreement with the recording is an error.
pub fn replay_episode(engine: &Engine, episode: &EpisodeRecord) -> Result<EpisodeRecord, ReplayMismatch> {
    let engine = Engine {
        criterion: episode.method.criterion(),
        ..engine.clone()
    };
    let mut steps = Vec::with_capacity(episode.steps.len());
    for (i, step) in episode.steps.iter().enumerate() {
        let diverged = |what: String| ReplayMismatch { step: i, what };
        if step.evaluations.is_empty() {
            steps.push(step.clone());
            continue;
        }
        let prior = if step.prior_draws.is_empty() {
            let p = step
                .prior_before
                .ok_or_else(|| diverged("missing prior".into()))?;
            Belief::new(p).map_err(|e| diverged(e.to_string()))?
        } else {
            mean_belief(&step.prior_draws)
        };
        let evaluations = step
            .evaluations
            .iter()
            .map(|e| {
                if e.failure.is_some() {
                    return Ok(e.clone());
                }
                score_candidate(
                    &e.feature,
                    e.outcome_samples.clone(),
                    e.posterior_draws.clone(),
                    prior,
                    &engine.costs,
                )
                .map_err(|err| diverged(err.to_string()))
            })
            .collect::<Result<Vec<CandidateEvaluation>, _>>()?;
        let rec = engine.recommend_from(i, prior, step.prior_draws.clone(), evaluations);
        if Some(rec.prior) != step.prior_before {
            return Err(diverged(format!("prior {} != recorded {:?}", rec.prior, step.prior_before)));
        }
        if rec.evaluations != step.evaluations {
            return Err(diverged("candidate scores differ".into()));
        }
        if Some(rec.stop_threshold) != step.stop_threshold {
            return Err(diverged("stopping threshold differs".into()));
        }
        match (&step.chosen, step.chosen_by) {
            (None, _) if !rec.would_stop => {
                return Err(diverged("recorded stop but the rule continues".into()))
            }
            (Some(c), Some(ChosenBy::Criterion)) if rec.best.as_ref() != Some(c) => {
                return Err(diverged(format!("recommended {:?}, recorded {c}", rec.best)))
            }
            _ => {}
        }
        steps.push(TrajectoryStep {
            step_index: i,
            prior_before: Some(rec.prior),
            prior_draws: rec.prior_draws,
            evaluations: rec.evaluations,
            chosen: step.chosen.clone(),
            chosen_by: step.chosen_by,
            observed_value: step.observed_value.clone(),
            prior_after: step.prior_after,
            stop_threshold: Some(rec.stop_threshold),
        });
    }
    // beliefs after each acquisition come from the next step or the final risk
    let final_risk = (!episode.final_draws.is_empty()).then(|| mean_belief(&episode.final_draws).p());
    if final_risk != episode.final_risk {
        return Err(ReplayMismatch {
            step: steps.len(),
            what: format!("final risk {final_risk:?} != recorded {:?}", episode.final_risk),
        });
    }
    let n = steps.len();
    for i in 0..n {
        if steps[i].chosen.is_some() {
            let next = if i + 1 < n { steps[i + 1].prior_before } else { final_risk };
            if next.is_some() {
                steps[i].prior_after = next;
            }
        }
    }
    Ok(EpisodeRecord {
        steps,
        final_risk,
        predicted: final_risk.map(|r| u8::from(r >= engine.policy.theta)),
        ..episode.clone()
    })
}

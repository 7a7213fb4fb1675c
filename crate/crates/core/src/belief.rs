//! Closed-form Bernoulli information theory.
//!
//! Every quantity here is measured in nats. Probabilities are clamped into
//! `[EPS, 1 - EPS]` before any logarithm is taken, so surrogate replies of
//! exactly 0 or 1 still yield finite divergences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Clamp applied to every probability before a logarithm.
pub const EPS: f64 = 1e-6;

/// Slack allowed outside `[0, 1]` when constructing a [`Belief`].
pub const RANGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("probability {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("no posterior samples")]
    NoSamples,
    #[error("posterior draws and weights differ in length ({draws} vs {weights})")]
    WeightMismatch { draws: usize, weights: usize },
    #[error("weights must be nonnegative with a positive sum")]
    BadWeights,
    #[error("no cost for feature `{0}`")]
    NoCost(String),
    #[error("raw cost for `{feature}` must exceed 1, got {cost}")]
    CostTooSmall { feature: String, cost: f64 },
    #[error("decision threshold must lie in (0, 1), got {0}")]
    BadTheta(f64),
    #[error("gamma must lie in [0, 1], got {0}")]
    BadGamma(f64),
}

#[inline]
pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Bernoulli disease probability.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Belief(f64);

impl Belief {
    pub fn new(p: f64) -> Result<Self, BeliefError> {
        if !(-RANGE_TOLERANCE..=1.0 + RANGE_TOLERANCE).contains(&p) {
            return Err(BeliefError::OutOfRange(p));
        }
        Ok(Self(clamp_probability(p)))
    }

    /// Clamps any finite input into range instead of rejecting it.
    pub fn saturating(p: f64) -> Self {
        if p.is_nan() {
            return Self(0.5);
        }
        Self(clamp_probability(p))
    }

    pub fn p(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Belief {
    type Error = BeliefError;

    fn try_from(p: f64) -> Result<Self, Self::Error> {
        Belief::new(p)
    }
}

impl From<Belief> for f64 {
    fn from(b: Belief) -> f64 {
        b.0
    }
}

/// Decision threshold and confidence-margin parameters of the stopping rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingPolicy {
    pub theta: f64,
    pub gamma: f64,
}

impl Default for StoppingPolicy {
    fn default() -> Self {
        Self {
            theta: 0.5,
            gamma: 0.5,
        }
    }
}

impl StoppingPolicy {
    pub fn new(theta: f64, gamma: f64) -> Result<Self, BeliefError> {
        let policy = Self { theta, gamma };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(BeliefError::BadTheta(self.theta));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(BeliefError::BadGamma(self.gamma));
        }
        Ok(())
    }

    /// Distance between the belief and the decision threshold.
    pub fn confidence_gap(&self, prior: Belief) -> f64 {
        (prior.p() - self.theta).abs()
    }

    /// Target posterior placed `gamma * gap` past the threshold, on the side
    /// opposite the prior, clamped to [0, 1].
    pub fn target(&self, prior: Belief) -> f64 {
        let gap = self.confidence_gap(prior);
        let q = if prior.p() < self.theta {
            self.theta + self.gamma * gap
        } else {
            self.theta - self.gamma * gap
        };
        q.clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    #[default]
    Uniform,
    PerFeature,
}

/// Raw per-test costs `c*`; utility divides by `ln c*`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostModel {
    pub mode: CostMode,
    #[serde(default)]
    pub raw_costs: BTreeMap<String, f64>,
    /// Trade-off weight of the unrelaxed objective. Carried for reporting only.
    #[serde(default)]
    pub lambda: f64,
}

impl CostModel {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn per_feature(raw_costs: BTreeMap<String, f64>) -> Result<Self, BeliefError> {
        let model = Self {
            mode: CostMode::PerFeature,
            raw_costs,
            lambda: 0.0,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), BeliefError> {
        if self.mode == CostMode::PerFeature {
            for (feature, &cost) in &self.raw_costs {
                if !(cost > 1.0) || !cost.is_finite() {
                    return Err(BeliefError::CostTooSmall {
                        feature: feature.clone(),
                        cost,
                    });
                }
            }
        }
        Ok(())
    }
}

/// `KL(Bern(q) || Bern(p))`.
pub fn kl_bernoulli(q: f64, p: f64) -> f64 {
    let q = clamp_probability(q);
    let p = clamp_probability(p);
    let kl = q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
    // rounding can leave -1e-17 when q == p
    kl.max(0.0)
}

pub fn entropy_bernoulli(p: f64) -> f64 {
    let p = clamp_probability(p);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

/// Mean of `KL(posterior_j || prior)` over the draws.
pub fn expected_kl(posterior_draws: &[f64], prior: Belief) -> Result<f64, BeliefError> {
    if posterior_draws.is_empty() {
        return Err(BeliefError::NoSamples);
    }
    let total: f64 = posterior_draws
        .iter()
        .map(|&q| kl_bernoulli(q, prior.p()))
        .sum();
    Ok(total / posterior_draws.len() as f64)
}

/// Weighted form of [`expected_kl`], used when outcomes are enumerated with
/// their exact probabilities instead of sampled.
pub fn expected_kl_weighted(
    posterior_draws: &[f64],
    weights: &[f64],
    prior: Belief,
) -> Result<f64, BeliefError> {
    let total_weight = check_weights(posterior_draws, weights)?;
    let total: f64 = posterior_draws
        .iter()
        .zip(weights)
        .map(|(&q, &w)| w * kl_bernoulli(q, prior.p()))
        .sum();
    Ok(total / total_weight)
}

/// Entropy reduction `H(prior) - mean_j H(posterior_j)`. Can be negative.
pub fn entropy_eig(prior: Belief, posterior_draws: &[f64]) -> Result<f64, BeliefError> {
    if posterior_draws.is_empty() {
        return Err(BeliefError::NoSamples);
    }
    let mean_posterior_entropy: f64 = posterior_draws
        .iter()
        .map(|&q| entropy_bernoulli(q))
        .sum::<f64>()
        / posterior_draws.len() as f64;
    Ok(entropy_bernoulli(prior.p()) - mean_posterior_entropy)
}

pub fn entropy_eig_weighted(
    prior: Belief,
    posterior_draws: &[f64],
    weights: &[f64],
) -> Result<f64, BeliefError> {
    let total_weight = check_weights(posterior_draws, weights)?;
    let mean_posterior_entropy: f64 = posterior_draws
        .iter()
        .zip(weights)
        .map(|(&q, &w)| w * entropy_bernoulli(q))
        .sum::<f64>()
        / total_weight;
    Ok(entropy_bernoulli(prior.p()) - mean_posterior_entropy)
}

fn check_weights(draws: &[f64], weights: &[f64]) -> Result<f64, BeliefError> {
    if draws.is_empty() {
        return Err(BeliefError::NoSamples);
    }
    if draws.len() != weights.len() {
        return Err(BeliefError::WeightMismatch {
            draws: draws.len(),
            weights: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
        return Err(BeliefError::BadWeights);
    }
    Ok(total)
}

/// Cost-normalized information gain.
pub fn utility(info_gain: f64, feature: &str, costs: &CostModel) -> Result<f64, BeliefError> {
    match costs.mode {
        CostMode::Uniform => Ok(info_gain),
        CostMode::PerFeature => {
            let raw = costs
                .raw_costs
                .get(feature)
                .ok_or_else(|| BeliefError::NoCost(feature.to_string()))?;
            if !(*raw > 1.0) {
                return Err(BeliefError::CostTooSmall {
                    feature: feature.to_string(),
                    cost: *raw,
                });
            }
            Ok(info_gain / raw.ln())
        }
    }
}

/// Expected KL a candidate must reach to justify acquisition.
pub fn stopping_threshold(prior: Belief, policy: &StoppingPolicy) -> f64 {
    kl_bernoulli(policy.target(prior), prior.p())
}

//! Generative surrogates that stand in for the unknown outcome and risk
//! distributions.
//!
//! Three backends share the [`Surrogate`] trait: a scripted lookup table, an
//! analytic synthetic world with exact posteriors, and a remote
//! chat-completion endpoint.

mod prompts;
mod remote;
mod scripted;
mod synthetic;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetSchema, Evidence, FeatureSpec, Value};

pub use prompts::{PromptSet, PromptTemplates};
pub use remote::{ChatMessage, ChatRequest, RemoteSurrogate};
pub use scripted::{ScriptedSurrogate, ScriptedTables, WILDCARD};
pub use synthetic::{evidence_of, SyntheticFeature, SyntheticSurrogate, SyntheticWorld};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("unparseable sample for `{feature}`: {raw:?}")]
    UnparseableSample { feature: String, raw: String },
    #[error("unparseable risk: {raw:?}")]
    UnparseableRisk { raw: String },
    #[error("invalid selection: {raw:?}")]
    InvalidSelection { raw: String },
    #[error("malformed feature list: {raw:?}")]
    MalformedList { raw: String },
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("no scripted entry for {0}")]
    MissingEntry(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("surrogate configuration: {0}")]
    Config(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParseError {
    #[error("empty reply")]
    Empty,
    #[error("reply has extra tokens: {0:?}")]
    ExtraTokens(String),
    #[error("not a number: {0:?}")]
    NotANumber(String),
    #[error("non-finite value: {0:?}")]
    NonFinite(String),
}

/// Parses a reply that must consist of exactly one real-number token.
pub fn parse_strict_float(raw: &str) -> Result<f64, ParseError> {
    let token = raw.trim();
    if token.is_empty() {
        return Err(ParseError::Empty);
    }
    if token.split_whitespace().nth(1).is_some() {
        return Err(ParseError::ExtraTokens(raw.to_string()));
    }
    let value: f64 = token
        .parse()
        .map_err(|_| ParseError::NotANumber(raw.to_string()))?;
    if !value.is_finite() {
        return Err(ParseError::NonFinite(raw.to_string()));
    }
    Ok(value)
}

fn strip_quotes(s: &str) -> &str {
    s.trim()
        .trim_end_matches('.')
        .trim_matches(|c| c == '\'' || c == '"' || c == '`')
        .trim()
}

/// Matches a free-text reply against the candidate list, ignoring case and
/// surrounding quotes.
pub fn match_selection<'a>(raw: &str, candidates: &'a [String]) -> Option<&'a str> {
    let reply = strip_quotes(raw);
    candidates
        .iter()
        .find(|c| c.eq_ignore_ascii_case(reply))
        .map(String::as_str)
}

/// Parses a Python-style list of feature names, e.g. `['Glucose', 'BMI']`,
/// requiring exactly `n` distinct members of `candidates`.
pub fn parse_feature_list(
    raw: &str,
    candidates: &[String],
    n: usize,
) -> Result<Vec<String>, SurrogateError> {
    let malformed = || SurrogateError::MalformedList {
        raw: raw.to_string(),
    };
    let body = raw
        .trim()
        .trim_start_matches("```python")
        .trim_start_matches("```")
        .trim_end_matches("```")
        .trim();
    let inner = body
        .strip_prefix('[')
        .and_then(|b| b.strip_suffix(']'))
        .ok_or_else(malformed)?;
    let mut chosen: Vec<String> = Vec::new();
    for item in inner.split(',').map(strip_quotes).filter(|s| !s.is_empty()) {
        let name = match_selection(item, candidates).ok_or_else(malformed)?;
        if chosen.iter().any(|c| c == name) {
            return Err(malformed());
        }
        chosen.push(name.to_string());
    }
    if chosen.len() != n {
        return Err(malformed());
    }
    Ok(chosen)
}

/// Surrogate view of the current patient.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub patient_id: &'a str,
    pub disease: &'a str,
    pub evidence: &'a Evidence,
    pub vignette: &'a str,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSample {
    pub feature: String,
    pub value: Value,
    /// Raw reply or table cell the value came from.
    pub raw_response: String,
    /// Probability mass for enumerated outcomes; 1 for Monte Carlo draws.
    #[serde(default = "unit_weight", skip_serializing_if = "is_unit_weight")]
    pub weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

fn is_unit_weight(w: &f64) -> bool {
    *w == 1.0
}

impl OutcomeSample {
    pub fn new(feature: &str, value: Value, raw_response: impl Into<String>) -> Self {
        Self {
            feature: feature.to_string(),
            value,
            raw_response: raw_response.into(),
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryCounts {
    pub risk: u64,
    pub outcome: u64,
    pub selection: u64,
}

impl QueryCounts {
    pub fn total(&self) -> u64 {
        self.risk + self.outcome + self.selection
    }
}

impl std::ops::Sub for QueryCounts {
    type Output = QueryCounts;

    fn sub(self, rhs: Self) -> Self {
        QueryCounts {
            risk: self.risk - rhs.risk,
            outcome: self.outcome - rhs.outcome,
            selection: self.selection - rhs.selection,
        }
    }
}

/// Monotone per-kind query counter.
#[derive(Debug, Default)]
pub struct QueryCounter {
    risk: AtomicU64,
    outcome: AtomicU64,
    selection: AtomicU64,
}

impl QueryCounter {
    pub fn add_risk(&self, n: u64) {
        self.risk.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_outcome(&self, n: u64) {
        self.outcome.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_selection(&self, n: u64) {
        self.selection.fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> QueryCounts {
        QueryCounts {
            risk: self.risk.load(Ordering::Relaxed),
            outcome: self.outcome.load(Ordering::Relaxed),
            selection: self.selection.load(Ordering::Relaxed),
        }
    }
}

pub trait Surrogate: Send + Sync {
    /// Draws `m` hypothetical outcomes of `feature` for the patient in `ctx`.
    fn sample_outcomes(
        &self,
        ctx: &Context<'_>,
        feature: &FeatureSpec,
        m: usize,
        seed: u64,
    ) -> Result<Vec<OutcomeSample>, SurrogateError>;

    /// Disease probability given the context. `draw` distinguishes repeated
    /// queries of the same context.
    fn estimate_risk(&self, ctx: &Context<'_>, draw: usize) -> Result<f64, SurrogateError>;

    fn implicit_select(
        &self,
        ctx: &Context<'_>,
        unknown: &[String],
    ) -> Result<String, SurrogateError>;

    fn global_select(&self, all: &[String], n: usize) -> Result<Vec<String>, SurrogateError>;

    fn counter(&self) -> &QueryCounter;

    fn queries(&self) -> QueryCounts {
        self.counter().snapshot()
    }
}

impl<S: Surrogate + ?Sized> Surrogate for Arc<S> {
    fn sample_outcomes(
        &self,
        ctx: &Context<'_>,
        feature: &FeatureSpec,
        m: usize,
        seed: u64,
    ) -> Result<Vec<OutcomeSample>, SurrogateError> {
        (**self).sample_outcomes(ctx, feature, m, seed)
    }

    fn estimate_risk(&self, ctx: &Context<'_>, draw: usize) -> Result<f64, SurrogateError> {
        (**self).estimate_risk(ctx, draw)
    }

    fn implicit_select(
        &self,
        ctx: &Context<'_>,
        unknown: &[String],
    ) -> Result<String, SurrogateError> {
        (**self).implicit_select(ctx, unknown)
    }

    fn global_select(&self, all: &[String], n: usize) -> Result<Vec<String>, SurrogateError> {
        (**self).global_select(all, n)
    }

    fn counter(&self) -> &QueryCounter {
        (**self).counter()
    }
}

/// Wraps a shared surrogate with a private counter, so concurrent episodes
/// can each account for their own queries exactly.
pub struct Counted<'a> {
    inner: &'a dyn Surrogate,
    counter: QueryCounter,
}

impl<'a> Counted<'a> {
    pub fn new(inner: &'a dyn Surrogate) -> Self {
        Self {
            inner,
            counter: QueryCounter::default(),
        }
    }
}

impl Surrogate for Counted<'_> {
    fn sample_outcomes(
        &self,
        ctx: &Context<'_>,
        feature: &FeatureSpec,
        m: usize,
        seed: u64,
    ) -> Result<Vec<OutcomeSample>, SurrogateError> {
        self.counter.add_outcome(m as u64);
        self.inner.sample_outcomes(ctx, feature, m, seed)
    }

    fn estimate_risk(&self, ctx: &Context<'_>, draw: usize) -> Result<f64, SurrogateError> {
        self.counter.add_risk(1);
        self.inner.estimate_risk(ctx, draw)
    }

    fn implicit_select(
        &self,
        ctx: &Context<'_>,
        unknown: &[String],
    ) -> Result<String, SurrogateError> {
        self.counter.add_selection(1);
        self.inner.implicit_select(ctx, unknown)
    }

    fn global_select(&self, all: &[String], n: usize) -> Result<Vec<String>, SurrogateError> {
        self.counter.add_selection(1);
        self.inner.global_select(all, n)
    }

    fn counter(&self) -> &QueryCounter {
        &self.counter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurrogateKind {
    Scripted,
    Synthetic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    /// Samples per query, `M`.
    #[serde(default = "default_m")]
    pub samples_per_query: usize,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
    /// Directory holding `samples.tsv`, `risks.tsv` and optionally `global.txt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tables: Option<PathBuf>,
    /// TOML file describing a [`SyntheticWorld`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub world: Option<PathBuf>,
    /// Enumerate synthetic outcomes with exact weights instead of sampling.
    #[serde(default)]
    pub exact: bool,
    /// TOML file overriding the built-in prompt templates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_m() -> usize {
    10
}
fn default_in_flight() -> usize {
    8
}
fn default_backoff() -> u64 {
    500
}

impl SurrogateConfig {
    pub fn new(kind: SurrogateKind) -> Self {
        Self {
            kind,
            endpoint_url: None,
            model_name: None,
            temperature: default_temperature(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout(),
            samples_per_query: default_m(),
            max_in_flight: default_in_flight(),
            backoff_ms: default_backoff(),
            tables: None,
            world: None,
            exact: false,
            prompts: None,
        }
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        if !(self.temperature >= 0.0) {
            return Err(SurrogateError::Config("temperature must be >= 0".into()));
        }
        if self.samples_per_query == 0 {
            return Err(SurrogateError::Config("samples_per_query must be >= 1".into()));
        }
        if self.max_in_flight == 0 {
            return Err(SurrogateError::Config("max_in_flight must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(SurrogateError::Config("timeout_secs must be > 0".into()));
        }
        Ok(())
    }

    /// Resolves relative table/world/prompt paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for path in [&mut self.tables, &mut self.world, &mut self.prompts]
            .into_iter()
            .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn build(&self, schema: &DatasetSchema) -> Result<Arc<dyn Surrogate>, SurrogateError> {
        self.validate()?;
        let missing = |what: &str| SurrogateError::Config(format!("{what} is required"));
        Ok(match self.kind {
            SurrogateKind::Scripted => {
                let dir = self.tables.as_ref().ok_or_else(|| missing("tables"))?;
                let tables = ScriptedTables::load(dir)?;
                Arc::new(ScriptedSurrogate::new(
                    tables,
                    schema.clone(),
                    self.samples_per_query,
                ))
            }
            SurrogateKind::Synthetic => {
                let path = self.world.as_ref().ok_or_else(|| missing("world"))?;
                let world = SyntheticWorld::load(path)?;
                Arc::new(SyntheticSurrogate::new(world, self.exact))
            }
            SurrogateKind::Remote => {
                let prompts = match &self.prompts {
                    Some(path) => PromptTemplates::load(path)?,
                    None => PromptTemplates::for_schema(schema),
                };
                Arc::new(RemoteSurrogate::new(
                    self.clone(),
                    PromptSet::new(prompts, schema.clone()),
                )?)
            }
        })
    }
}

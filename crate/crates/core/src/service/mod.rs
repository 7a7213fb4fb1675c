//! HTTP session service for the live, clinician-in-the-loop workflow.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/v1/datasets` | datasets, features and patient ids |
//! | POST | `/v1/sessions` | create a session |
//! | GET | `/v1/sessions/{id}` | session state |
//! | POST | `/v1/sessions/{id}/recommendation` | evaluate the current step (cached) |
//! | POST | `/v1/sessions/{id}/result` | submit an observed result |
//! | POST | `/v1/sessions/{id}/conclude` | close the session |
//! | GET | `/v1/sessions/{id}/trajectory` | full audit trail |

mod error;
mod store;

pub use error::{ApiError, ErrorBody, RETRY_AFTER_SECS};
pub use store::{SessionStore, StoredSession};

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::belief::StoppingPolicy;
use crate::dataset::{Dataset, Evidence, FeatureKind, Value};
use crate::engine::{
    CandidateEvaluation, ChosenBy, Criterion, Engine, Recommendation, SessionState, Status,
    TrajectoryStep,
};
use crate::surrogate::{Counted, QueryCounts, Surrogate, SurrogateConfig};

/// Environment variable holding the optional bearer token.
pub const TOKEN_VAR: &str = "DIAGBED_TOKEN";

pub struct DatasetEntry {
    pub dataset: Arc<Dataset>,
    pub surrogate: Arc<dyn Surrogate>,
}

#[derive(Clone)]
pub struct AppState {
    pub datasets: Arc<BTreeMap<String, DatasetEntry>>,
    pub store: Arc<SessionStore>,
    pub token: Option<Arc<str>>,
    /// Samples per candidate and risk queries per prior.
    pub m: usize,
}

/// Loads every dataset manifest in `dir`, skipping `*.world.toml` synthetic
/// world files. A sibling `<name>.surrogate.toml`
/// overrides `default_surrogate` for that dataset; datasets with neither
/// are skipped. Must run outside an async runtime.
pub fn load_datasets(
    dir: &Path,
    default_surrogate: Option<&SurrogateConfig>,
) -> Result<BTreeMap<String, DatasetEntry>, String> {
    let mut manifests: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "toml")
                && ![".surrogate.toml", ".world.toml"]
                    .iter()
                    .any(|suffix| p.to_string_lossy().ends_with(suffix))
        })
        .collect();
    manifests.sort();
    let mut out = BTreeMap::new();
    for path in manifests {
        let dataset = Dataset::from_manifest(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let own = path.with_extension("surrogate.toml");
        let config = if own.exists() {
            let text = std::fs::read_to_string(&own).map_err(|e| format!("{}: {e}", own.display()))?;
            let mut c: SurrogateConfig =
                toml::from_str(&text).map_err(|e| format!("{}: {e}", own.display()))?;
            c.resolve_paths(dir);
            c
        } else if let Some(c) = default_surrogate {
            c.clone()
        } else {
            tracing::warn!(dataset = %dataset.name, "no surrogate configured, skipping");
            continue;
        };
        let surrogate = config
            .build(&dataset.schema)
            .map_err(|e| format!("{}: {e}", dataset.name))?;
        tracing::info!(dataset = %dataset.name, patients = dataset.records.len(), "dataset loaded");
        out.insert(
            dataset.name.clone(),
            DatasetEntry {
                dataset: Arc::new(dataset),
                surrogate,
            },
        );
    }
    Ok(out)
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/datasets", get(list_datasets))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/recommendation", post(get_recommendation))
        .route("/sessions/{id}/result", post(submit_result))
        .route("/sessions/{id}/conclude", post(conclude))
        .route("/sessions/{id}/trajectory", get(get_trajectory))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .nest("/v1", api)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Result<Response, ApiError> {
    if let Some(token) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == &**token);
        if !ok {
            return Err(ApiError::unauthorized());
        }
    }
    Ok(next.run(req).await)
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(None, format!("invalid request body: {e}")))
}

fn parse_id(raw: &str) -> Result<Uuid, ApiError> {
    Uuid::parse_str(raw).map_err(|_| ApiError::not_found(format!("no session `{raw}`")))
}

fn entry(state: &AppState, raw: &str) -> Result<Arc<store::Entry>, ApiError> {
    let id = parse_id(raw)?;
    state
        .store
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("no session `{raw}`")))
}

fn dataset_of<'a>(state: &'a AppState, name: &str) -> Result<&'a DatasetEntry, ApiError> {
    state
        .datasets
        .get(name)
        .ok_or_else(|| ApiError::not_found(format!("no dataset `{name}`")))
}

fn io_error(e: std::io::Error) -> ApiError {
    ApiError::internal(format!("session store: {e}"))
}

/// Converts a JSON scalar into a typed value for `feature`.
fn json_value(
    dataset: &Dataset,
    feature: &str,
    raw: &serde_json::Value,
    field: &str,
) -> Result<Value, ApiError> {
    let spec = dataset
        .schema
        .feature(feature)
        .ok_or_else(|| ApiError::validation(Some(field), format!("unknown feature `{feature}`")))?;
    let value = match raw {
        serde_json::Value::Number(n) => Value::Number(
            n.as_f64()
                .ok_or_else(|| ApiError::validation(Some(field), "number out of range"))?,
        ),
        serde_json::Value::String(s) => Value::Category(s.clone()),
        serde_json::Value::Bool(b) if spec.kind == FeatureKind::Categorical => {
            Value::Category(if *b { "yes" } else { "no" }.into())
        }
        _ => return Err(ApiError::validation(Some(field), "expected a number or a string")),
    };
    spec.check_value(&value)
        .map_err(|e| ApiError::validation(Some(field), e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub name: String,
    pub kind: FeatureKind,
    pub unit: String,
    pub categories: Vec<String>,
    pub known_at_start: bool,
    pub ref_info: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub disease_name: String,
    pub features: Vec<FeatureInfo>,
    pub patients: Vec<String>,
}

async fn list_datasets(State(state): State<AppState>) -> Json<Vec<DatasetInfo>> {
    Json(
        state
            .datasets
            .values()
            .map(|e| {
                let d = &e.dataset;
                DatasetInfo {
                    name: d.name.clone(),
                    disease_name: d.schema.disease_name.clone(),
                    features: d
                        .schema
                        .features
                        .iter()
                        .map(|f| FeatureInfo {
                            name: f.name.clone(),
                            kind: f.kind,
                            unit: f.unit.clone(),
                            categories: f.categories.clone(),
                            known_at_start: f.known_at_start,
                            ref_info: f.ref_info.clone(),
                        })
                        .collect(),
                    patients: d.records.iter().map(|r| r.id.clone()).collect(),
                }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyOverride {
    pub theta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Dataset name; alternatively `disease` selects the dataset by its
    /// disease name.
    pub dataset: Option<String>,
    pub disease: Option<String>,
    pub patient_id: Option<String>,
    /// Inline known features, used instead of `patient_id`.
    pub known: Option<BTreeMap<String, serde_json::Value>>,
    pub policy: Option<PolicyOverride>,
    pub criterion: Option<Criterion>,
    /// Maximum number of acquisitions; unlimited when absent.
    pub budget: Option<usize>,
    /// Replaces the estimated prior of the first step.
    pub prior_override: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnownFeature {
    pub feature: String,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: Uuid,
    pub dataset: String,
    pub disease: String,
    pub patient_id: String,
    pub status: Status,
    pub known: Vec<KnownFeature>,
    pub unknown: Vec<String>,
    pub prior: Option<f64>,
    pub prior_override: Option<f64>,
    pub policy: StoppingPolicy,
    pub criterion: Criterion,
    pub budget: Option<usize>,
    pub steps: usize,
    pub acquired: usize,
    pub has_recommendation: bool,
    pub queries_used: QueryCounts,
    pub created_at: chrono::DateTime<Utc>,
    pub updated_at: chrono::DateTime<Utc>,
}

impl From<&StoredSession> for SessionView {
    fn from(s: &StoredSession) -> Self {
        let st = &s.state;
        Self {
            session_id: s.session_id,
            dataset: s.dataset.clone(),
            disease: st.disease.clone(),
            patient_id: st.patient_id.clone(),
            status: st.status,
            known: st
                .known
                .iter()
                .filter_map(|f| {
                    st.evidence.get(f).map(|v| KnownFeature {
                        feature: f.clone(),
                        value: v.clone(),
                    })
                })
                .collect(),
            unknown: st.unknown.clone(),
            prior: st.prior,
            prior_override: st.prior_override,
            policy: s.policy,
            criterion: s.criterion,
            budget: s.budget,
            steps: st.trajectory.len(),
            acquired: st.acquired(),
            has_recommendation: s.pending.is_some(),
            queries_used: st.queries_used,
            created_at: s.created_at,
            updated_at: s.updated_at,
        }
    }
}

fn resolve_dataset<'a>(state: &'a AppState, req: &CreateSession) -> Result<&'a DatasetEntry, ApiError> {
    if let Some(name) = &req.dataset {
        return dataset_of(state, name);
    }
    let Some(disease) = &req.disease else {
        return Err(ApiError::validation(Some("dataset"), "either `dataset` or `disease` is required"));
    };
    state
        .datasets
        .values()
        .find(|e| {
            e.dataset.schema.disease_name.eq_ignore_ascii_case(disease)
                || e.dataset
                    .records
                    .iter()
                    .any(|r| r.disease.as_deref().is_some_and(|d| d.eq_ignore_ascii_case(disease)))
        })
        .ok_or_else(|| ApiError::not_found(format!("no dataset for disease `{disease}`")))
}

async fn create_session(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let entry = resolve_dataset(&state, &req)?;
    let dataset = &entry.dataset;
    let mut policy = StoppingPolicy::default();
    if let Some(o) = &req.policy {
        policy.theta = o.theta.unwrap_or(policy.theta);
        policy.gamma = o.gamma.unwrap_or(policy.gamma);
    }
    policy
        .validate()
        .map_err(|e| ApiError::validation(Some("policy"), e.to_string()))?;
    if let Some(p) = req.prior_override {
        if !(0.0..=1.0).contains(&p) {
            return Err(ApiError::validation(Some("prior_override"), "must lie in [0, 1]"));
        }
    }
    if req.budget == Some(0) {
        return Err(ApiError::validation(Some("budget"), "must be >= 1"));
    }
    let mut session = match (&req.patient_id, &req.known) {
        (Some(_), Some(_)) => {
            return Err(ApiError::validation(
                Some("known"),
                "give either `patient_id` or `known`, not both",
            ))
        }
        (Some(id), None) => {
            let record = dataset
                .record(id)
                .ok_or_else(|| ApiError::not_found(format!("no patient `{id}` in `{}`", dataset.name)))?;
            SessionState::from_record(&dataset.schema, record)?
        }
        (None, known) => {
            let mut evidence = Evidence::new();
            for (name, raw) in known.iter().flatten() {
                let field = format!("known.{name}");
                evidence.insert(name, json_value(dataset, name, raw, &field)?, None);
            }
            let disease = req.disease.as_deref().unwrap_or(&dataset.schema.disease_name);
            let id = format!("inline-{}", Uuid::new_v4().simple());
            SessionState::new(&dataset.schema, &id, disease, evidence)?
        }
    };
    if session.unknown.is_empty() {
        return Err(ApiError::validation(Some("known"), "nothing left to acquire"));
    }
    session.prior_override = req.prior_override;
    let now = Utc::now();
    let stored = StoredSession {
        session_id: Uuid::new_v4(),
        dataset: dataset.name.clone(),
        policy,
        criterion: req.criterion.unwrap_or_default(),
        budget: req.budget,
        seed: req.seed.unwrap_or_else(rand::random),
        created_at: now,
        updated_at: now,
        state: session,
        pending: None,
    };
    let view = SessionView::from(&stored);
    state.store.insert(stored).map_err(io_error)?;
    tracing::info!(session = %view.session_id, dataset = %view.dataset, "session created");
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(SessionView::from(&*entry(&state, &id)?.snapshot())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationView {
    pub session_id: Uuid,
    pub step_index: usize,
    pub prior: f64,
    pub prior_draws: Vec<f64>,
    /// Schema order.
    pub candidates: Vec<CandidateEvaluation>,
    pub recommended: Option<String>,
    pub best: Option<String>,
    pub best_expected_kl: Option<f64>,
    pub stop_threshold: f64,
    pub would_stop: bool,
}

impl RecommendationView {
    fn new(session_id: Uuid, r: &Recommendation) -> Self {
        Self {
            session_id,
            step_index: r.step_index,
            prior: r.prior,
            prior_draws: r.prior_draws.clone(),
            candidates: r.evaluations.clone(),
            recommended: r.recommended.clone(),
            best: r.best.clone(),
            best_expected_kl: r
                .evaluations
                .iter()
                .filter(|e| e.is_ok())
                .map(|e| e.expected_kl)
                .reduce(f64::max),
            stop_threshold: r.stop_threshold,
            would_stop: r.would_stop,
        }
    }
}

async fn get_recommendation(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<RecommendationView>, ApiError> {
    let entry = entry(&state, &id)?;
    let mut s = entry.state.lock().await;
    if s.state.status != Status::Active {
        return Err(ApiError::conflict(format!("session is {}", s.state.status)));
    }
    if let Some(r) = &s.pending {
        return Ok(Json(RecommendationView::new(s.session_id, r)));
    }
    if s.state.unknown.is_empty() || s.budget.is_some_and(|b| s.state.acquired() >= b) {
        s.state.status = Status::BudgetExhausted;
        s.updated_at = Utc::now();
        state.store.publish(&entry, &s).map_err(io_error)?;
        return Err(ApiError::conflict("budget exhausted"));
    }
    let ds = dataset_of(&state, &s.dataset)?;
    let engine = Engine::new(ds.dataset.schema.clone(), s.policy, s.criterion, state.m)?;
    let surrogate = ds.surrogate.clone();
    let session = s.state.clone();
    let seed = s.seed;
    let (result, used) = tokio::task::spawn_blocking(move || {
        let counted = Counted::new(&*surrogate);
        let r = engine.recommend(&session, &counted, seed);
        (r, counted.queries())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?;
    let q = &mut s.state.queries_used;
    q.risk += used.risk;
    q.outcome += used.outcome;
    q.selection += used.selection;
    let rec = match result {
        Ok(r) => r,
        Err(e) => {
            state.store.publish(&entry, &s).map_err(io_error)?;
            return Err(e.into());
        }
    };
    if let Some(last) = s.state.trajectory.last_mut() {
        if last.prior_after.is_none() {
            last.prior_after = Some(rec.prior);
        }
    }
    s.state.prior = Some(rec.prior);
    s.pending = Some(rec);
    s.updated_at = Utc::now();
    state.store.publish(&entry, &s).map_err(io_error)?;
    let view = RecommendationView::new(s.session_id, s.pending.as_ref().expect("just set"));
    Ok(Json(view))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubmitResult {
    pub feature: String,
    pub value: serde_json::Value,
    #[serde(default, rename = "override")]
    pub override_: bool,
}

async fn submit_result(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let req: SubmitResult = parse_body(&body)?;
    let entry = entry(&state, &id)?;
    let mut s = entry.state.lock().await;
    if s.state.status != Status::Active {
        return Err(ApiError::conflict(format!("session is {}", s.state.status)));
    }
    if s.state.evidence.contains(&req.feature) {
        return Err(ApiError::conflict(format!("feature `{}` is already known", req.feature)));
    }
    let recommended = s.pending.as_ref().and_then(|p| p.recommended.clone());
    if !req.override_ && recommended.as_deref() != Some(req.feature.as_str()) {
        let msg = match &recommended {
            Some(r) => format!("`{}` is not the recommended feature `{r}`; set override to submit it", req.feature),
            None => "no current recommendation; set override to submit anyway".to_string(),
        };
        return Err(ApiError::validation(Some("feature"), msg));
    }
    let ds = dataset_of(&state, &s.dataset)?;
    let value = json_value(&ds.dataset, &req.feature, &req.value, "value")?;
    let chosen_by = if recommended.as_deref() == Some(req.feature.as_str()) {
        ChosenBy::Criterion
    } else {
        ChosenBy::Override
    };
    let pending = s.pending.take();
    let schema = &ds.dataset.schema;
    if let Err(e) = s
        .state
        .apply_result(schema, &req.feature, value, chosen_by, pending.clone())
    {
        s.pending = pending;
        return Err(e.into());
    }
    s.updated_at = Utc::now();
    state.store.publish(&entry, &s).map_err(io_error)?;
    Ok(Json(SessionView::from(&*s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Conclusion {
    /// Stop on the current recommendation, recording its threshold.
    Stopped,
    Diagnosed,
    Abandoned,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conclude {
    pub outcome: Conclusion,
}

async fn conclude(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let req: Conclude = parse_body(&body)?;
    let entry = entry(&state, &id)?;
    let mut s = entry.state.lock().await;
    if s.state.status != Status::Active {
        return Err(ApiError::conflict(format!("session is {}", s.state.status)));
    }
    match req.outcome {
        Conclusion::Stopped => {
            let rec = s
                .pending
                .take()
                .ok_or_else(|| ApiError::conflict("fetch a recommendation before stopping"))?;
            s.state.stop(rec);
            s.state.backfill_priors(None);
        }
        Conclusion::Diagnosed | Conclusion::Abandoned => {
            let prior = s.pending.take().map(|r| r.prior);
            s.state.backfill_priors(prior);
            s.state.status = if req.outcome == Conclusion::Diagnosed {
                Status::Diagnosed
            } else {
                Status::Abandoned
            };
        }
    }
    s.updated_at = Utc::now();
    state.store.publish(&entry, &s).map_err(io_error)?;
    Ok(Json(SessionView::from(&*s)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryView {
    pub session_id: Uuid,
    pub status: Status,
    pub initial_known: Vec<String>,
    pub prior: Option<f64>,
    /// Prior at the start of each step.
    pub beliefs: Vec<Option<f64>>,
    pub steps: Vec<TrajectoryStep>,
    pub pending: Option<Recommendation>,
}

async fn get_trajectory(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<TrajectoryView>, ApiError> {
    let snap = entry(&state, &id)?.snapshot();
    let st = &snap.state;
    Ok(Json(TrajectoryView {
        session_id: snap.session_id,
        status: st.status,
        initial_known: st.known[..st.initial_known].to_vec(),
        prior: st.prior,
        beliefs: st.trajectory.iter().map(|s| s.prior_before).collect(),
        steps: st.trajectory.clone(),
        pending: snap.pending.clone(),
    }))
}

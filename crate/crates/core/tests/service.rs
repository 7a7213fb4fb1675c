mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value as Json};
use tower::ServiceExt;

use diagbed::dataset::FeatureSpec;
use diagbed::service::{load_datasets, router, AppState, DatasetEntry, SessionStore};
use diagbed::surrogate::{Context, OutcomeSample, QueryCounter, Surrogate, SurrogateError};

use common::repo_path;

fn state_with(store: SessionStore, token: Option<&str>) -> AppState {
    let datasets = load_datasets(&repo_path("datasets"), None).unwrap();
    AppState {
        datasets: Arc::new(datasets),
        store: Arc::new(store),
        token: token.map(Arc::from),
        m: 10,
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Json>) -> (StatusCode, Json, Option<String>) {
    call_auth(app, method, uri, body, None).await
}

async fn call_auth(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Json>,
    token: Option<&str>,
) -> (StatusCode, Json, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let retry = resp
        .headers()
        .get(header::RETRY_AFTER)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() {
        Json::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or(Json::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json, retry)
}

async fn create(app: &Router, body: Json) -> String {
    let (status, view, _) = call(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{view}");
    view["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn lists_datasets_with_surrogates_only() {
    let app = router(state_with(SessionStore::in_memory(), None));
    let (status, body, _) = call(&app, Method::GET, "/v1/datasets", None).await;
    assert_eq!(status, StatusCode::OK);
    let names: Vec<&str> = body.as_array().unwrap().iter().map(|d| d["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["demo"]);
    let features = body[0]["features"].as_array().unwrap();
    assert_eq!(features.len(), 5);
    assert_eq!(features[0]["name"], "fever");
    assert_eq!(features[0]["known_at_start"], true);
    assert_eq!(body[0]["patients"][0], "w0");
}

#[tokio::test]
async fn full_session_round_trip() {
    let app = router(state_with(SessionStore::in_memory(), None));
    let id = create(&app, json!({"dataset": "demo", "patient_id": "w0", "budget": 2, "seed": 3, "policy": {"gamma": 0.0}})).await;

    let (status, view, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["status"], "active");
    assert_eq!(view["known"], json!([{"feature": "fever", "value": "yes"}]));
    assert_eq!(view["unknown"], json!(["marker_a", "marker_b", "imaging", "culture"]));

    let uri = format!("/v1/sessions/{id}/recommendation");
    let (status, rec, _) = call(&app, Method::POST, &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{rec}");
    assert_eq!(rec["candidates"].as_array().unwrap().len(), 4);
    assert_eq!(rec["prior_draws"].as_array().unwrap().len(), 10);
    let best = rec["recommended"].as_str().unwrap().to_string();

    // cached until a result arrives
    let (_, again, _) = call(&app, Method::POST, &uri, None).await;
    assert_eq!(again, rec);
    let (_, view, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(view["queries_used"]["risk"], 10 + 10 * 4);

    let result_uri = format!("/v1/sessions/{id}/result");
    let other = ["marker_a", "marker_b", "imaging", "culture"].into_iter().find(|f| *f != best).unwrap();
    let (status, err, _) = call(&app, Method::POST, &result_uri, Some(json!({"feature": other, "value": "high"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["field"], "feature");

    let value = match best.as_str() {
        "imaging" => "normal",
        "culture" => "positive",
        _ => "high",
    };
    let (status, view, _) = call(&app, Method::POST, &result_uri, Some(json!({"feature": best, "value": value}))).await;
    assert_eq!(status, StatusCode::OK, "{view}");
    assert_eq!(view["acquired"], 1);
    assert_eq!(view["has_recommendation"], false);

    let (status, _, _) = call(&app, Method::POST, &result_uri, Some(json!({"feature": best, "value": value, "override": true}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    // override with an unrecommended feature
    let (status, view, _) = call(&app, Method::POST, &result_uri, Some(json!({"feature": "culture", "value": "negative", "override": true}))).await;
    if best != "culture" {
        assert_eq!(status, StatusCode::OK, "{view}");
        let (status, _, _) = call(&app, Method::POST, &uri, None).await;
        assert_eq!(status, StatusCode::CONFLICT);
        let (_, view, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
        assert_eq!(view["status"], "budget-exhausted");
    }

    let (status, traj, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}/trajectory"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(traj["initial_known"], json!(["fever"]));
    let steps = traj["steps"].as_array().unwrap();
    assert_eq!(steps[0]["chosen"], best);
    assert_eq!(steps[0]["chosen_by"], "criterion");
    assert_eq!(traj["beliefs"][0], rec["prior"]);
    if best != "culture" {
        assert_eq!(steps[1]["chosen_by"], "override");
    }
}

#[tokio::test]
async fn stop_and_conclude() {
    let app = router(state_with(SessionStore::in_memory(), None));
    let id = create(&app, json!({"dataset": "demo", "patient_id": "w1", "seed": 1})).await;
    let conclude = format!("/v1/sessions/{id}/conclude");
    let (status, _, _) = call(&app, Method::POST, &conclude, Some(json!({"outcome": "stopped"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, rec, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/recommendation"), None).await;
    let (status, view, _) = call(&app, Method::POST, &conclude, Some(json!({"outcome": "stopped"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["status"], "stopped-by-criterion");
    assert_eq!(view["prior"], rec["prior"]);
    let (status, _, _) = call(&app, Method::POST, &conclude, Some(json!({"outcome": "diagnosed"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (_, traj, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}/trajectory"), None).await;
    assert_eq!(traj["status"], "stopped-by-criterion");

    let id = create(&app, json!({"disease": "the target condition", "known": {"fever": "no"}})).await;
    let (status, view, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/conclude"), Some(json!({"outcome": "abandoned"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(view["status"], "abandoned");
    assert!(view["patient_id"].as_str().unwrap().starts_with("inline-"));
}

#[tokio::test]
async fn prior_override_replaces_first_prior() {
    let app = router(state_with(SessionStore::in_memory(), None));
    let id = create(&app, json!({"dataset": "demo", "known": {"fever": "yes"}, "prior_override": 0.5})).await;
    let (_, rec, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/recommendation"), None).await;
    assert_eq!(rec["prior"], 0.5);
    assert_eq!(rec["stop_threshold"], 0.0);
}

#[tokio::test]
async fn request_errors() {
    let app = router(state_with(SessionStore::in_memory(), None));
    let cases = [
        (json!({"dataset": "nope", "patient_id": "w0"}), StatusCode::NOT_FOUND),
        (json!({"dataset": "demo", "patient_id": "zz"}), StatusCode::NOT_FOUND),
        (json!({"disease": "gout"}), StatusCode::NOT_FOUND),
        (json!({"dataset": "demo", "patient_id": "w0", "known": {}}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"dataset": "demo", "patient_id": "w0", "budget": 0}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"dataset": "demo", "patient_id": "w0", "prior_override": 1.5}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"dataset": "demo", "patient_id": "w0", "policy": {"gamma": 2.0}}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"dataset": "demo", "known": {"fever": "maybe"}}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"dataset": "demo", "known": {"pulse": 80}}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"dataset": "demo", "colour": "blue"}), StatusCode::UNPROCESSABLE_ENTITY),
        (
            json!({"dataset": "demo", "known": {"fever": "yes", "marker_a": "high", "marker_b": "high", "imaging": "normal", "culture": "negative"}}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
    ];
    for (body, want) in cases {
        let (status, err, _) = call(&app, Method::POST, "/v1/sessions", Some(body.clone())).await;
        assert_eq!(status, want, "{body} -> {err}");
        assert!(err["code"].is_string() && err["message"].is_string(), "{err}");
    }
    let (status, err, _) = call(&app, Method::POST, "/v1/sessions/not-a-uuid/recommendation", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{err}");
    let missing = uuid::Uuid::new_v4();
    let (status, _, _) = call(&app, Method::GET, &format!("/v1/sessions/{missing}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let id = create(&app, json!({"dataset": "demo", "patient_id": "w0"})).await;
    let (status, err, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/result"), Some(json!({"feature": "marker_a"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["code"], "validation_error");
    let (status, _, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/result"), Some(json!({"feature": "fever", "value": "no", "override": true}))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, err, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/result"), Some(json!({"feature": "imaging", "value": "blurry", "override": true}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["field"], "value");
}

#[tokio::test]
async fn bearer_token_is_enforced() {
    let app = router(state_with(SessionStore::in_memory(), Some("s3cret")));
    let (status, err, _) = call(&app, Method::GET, "/v1/datasets", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(err["code"], "unauthorized");
    let (status, _, _) = call_auth(&app, Method::GET, "/v1/datasets", None, Some("wrong")).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let (status, _, _) = call_auth(&app, Method::GET, "/v1/datasets", None, Some("s3cret")).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _, _) = call(&app, Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
}

struct Down(QueryCounter);

impl Surrogate for Down {
    fn sample_outcomes(&self, _: &Context<'_>, _: &FeatureSpec, _: usize, _: u64) -> Result<Vec<OutcomeSample>, SurrogateError> {
        Err(SurrogateError::Transport("connection refused".into()))
    }
    fn estimate_risk(&self, _: &Context<'_>, _: usize) -> Result<f64, SurrogateError> {
        Err(SurrogateError::Transport("connection refused".into()))
    }
    fn implicit_select(&self, _: &Context<'_>, _: &[String]) -> Result<String, SurrogateError> {
        Err(SurrogateError::Transport("connection refused".into()))
    }
    fn global_select(&self, _: &[String], _: usize) -> Result<Vec<String>, SurrogateError> {
        Err(SurrogateError::Transport("connection refused".into()))
    }
    fn counter(&self) -> &QueryCounter {
        &self.0
    }
}

#[tokio::test]
async fn surrogate_outage_is_503_with_retry_after() {
    let loaded = load_datasets(&repo_path("datasets"), None).unwrap();
    let dataset = loaded["demo"].dataset.clone();
    let mut datasets = BTreeMap::new();
    datasets.insert(
        "demo".to_string(),
        DatasetEntry {
            dataset,
            surrogate: Arc::new(Down(QueryCounter::default())),
        },
    );
    let app = router(AppState {
        datasets: Arc::new(datasets),
        store: Arc::new(SessionStore::in_memory()),
        token: None,
        m: 10,
    });
    let id = create(&app, json!({"dataset": "demo", "patient_id": "w0"})).await;
    let (status, err, retry) = call(&app, Method::POST, &format!("/v1/sessions/{id}/recommendation"), None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(err["code"], "upstream_error");
    assert_eq!(retry.as_deref(), Some("5"));
    let (_, view, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(view["status"], "active");
}

#[tokio::test]
async fn sessions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with(SessionStore::open(dir.path()).unwrap(), None));
    let id = create(&app, json!({"dataset": "demo", "patient_id": "w2", "seed": 4})).await;
    let (_, rec, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/recommendation"), None).await;
    let (_, before, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    drop(app);

    let store = SessionStore::open(dir.path()).unwrap();
    assert_eq!(store.len(), 1);
    let app = router(state_with(store, None));
    let (status, after, _) = call(&app, Method::GET, &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(after, before);
    let (_, cached, _) = call(&app, Method::POST, &format!("/v1/sessions/{id}/recommendation"), None).await;
    assert_eq!(cached, rec);
}

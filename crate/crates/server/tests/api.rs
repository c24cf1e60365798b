use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use intentloop_server::{router, ApiSession, AppState, ErrorBody, ProfileView, RetrieveResponse, ServerConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn config(dir: &std::path::Path) -> ServerConfig {
    ServerConfig {
        data_dir: dir.to_path_buf(),
        ..ServerConfig::default()
    }
}

fn app(cfg: &ServerConfig) -> Router {
    let engine = cfg.build_engine().unwrap();
    router(AppState::new(engine, &cfg.data_dir), &cfg.cors_origins).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn error_code(v: &Value) -> String {
    let body: ErrorBody = serde_json::from_value(v.clone()).expect("error body shape");
    body.error
}

async fn start(app: &Router) -> ApiSession {
    let (status, v) = call(app, "POST", "/sessions", Some(json!({"text": "a hike near Seattle", "location": "Seattle"}))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn reject_until_done(app: &Router, mut s: ApiSession) -> ApiSession {
    while s.state == intentloop_core::session::SessionState::Refining {
        let rejected: Vec<&str> = s.suggestions.iter().map(|x| x.slot_id.as_str()).collect();
        let (status, v) = call(app, "POST", &format!("/sessions/{}/feedback", s.id), Some(json!({"selected": [], "rejected": rejected}))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        s = serde_json::from_value(v).unwrap();
    }
    s
}

#[tokio::test]
async fn create_session_returns_view() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&config(dir.path()));
    let s = start(&app).await;
    assert_eq!(s.step, 0);
    assert_eq!(s.state, intentloop_core::session::SessionState::Refining);
    assert_eq!(s.frame.as_ref().unwrap().intent_id, "hike");
    assert_eq!(s.suggestions.len(), 3);
    assert!(s.suggestions.iter().all(|x| !x.label.is_empty()));
    assert!((s.threshold - 1.0 / 20.0).abs() < 1e-12);
    assert!(dir.path().join("sessions").join(format!("{}.json", s.id)).exists());
}

#[tokio::test]
async fn create_session_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&config(dir.path()));
    let (status, v) = call(&app, "POST", "/sessions", Some(json!({"text": "   "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "invalid_request");

    let (status, v) = call(&app, "POST", "/sessions", Some(json!({"text": "zzqx wobble frump"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(&v), "unknown_intent");

    let (status, v) = call(&app, "POST", "/sessions", Some(json!({"location": "x"}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(!serde_json::from_value::<ErrorBody>(v).unwrap().detail.is_empty());
}

#[tokio::test]
async fn feedback_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&config(dir.path()));
    let (status, v) = call(&app, "POST", "/sessions/nope/feedback", Some(json!({"selected": [], "rejected": []}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "not_found");

    let s = start(&app).await;
    let uri = format!("/sessions/{}/feedback", s.id);
    let (status, _) = call(&app, "POST", &uri, Some(json!({"selected": ["hiking.s99"], "rejected": []}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let pick = s.suggestions[0].slot_id.clone();
    let (status, v) = call(&app, "POST", &uri, Some(json!({"selected": [pick], "rejected": []}))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let after: ApiSession = serde_json::from_value(v).unwrap();
    assert_eq!(after.step, 1);
    assert!(after.ics >= s.ics);

    let done = reject_until_done(&app, after).await;
    let (status, v) = call(&app, "POST", &uri, Some(json!({"selected": [], "rejected": []}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v} after {:?}", done.state);
    assert_eq!(error_code(&v), "invalid_state");

    assert!(dir.path().join("profile.json").exists());
    assert!(std::fs::read_dir(dir.path().join("models")).unwrap().count() >= 1);
}

#[tokio::test]
async fn retrieve_needs_ready() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&config(dir.path()));
    let s = start(&app).await;
    let uri = format!("/sessions/{}/retrieve", s.id);
    let (status, v) = call(&app, "POST", &uri, None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_code(&v), "invalid_state");

    reject_until_done(&app, s).await;
    let (status, v) = call(&app, "POST", &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let first: RetrieveResponse = serde_json::from_value(v).unwrap();
    assert!(!first.suggestions.is_empty());
    assert!(first.suggestions.iter().all(|x| x.url.starts_with("https://")));
    // A second call returns the stored ranking.
    let (status, v) = call(&app, "POST", &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<RetrieveResponse>(v).unwrap(), first);

    let (status, _) = call(&app, "POST", "/sessions/missing/retrieve", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn empty_search_results_are_ok() {
    let dir = tempfile::tempdir().unwrap();
    let seeded = config(dir.path()).build_engine().unwrap();
    let ontology_path = dir.path().join("ontology.json");
    seeded.ontology().save(&ontology_path).unwrap();
    let cfg = ServerConfig {
        ontology: Some(ontology_path),
        ..config(dir.path())
    };
    let app = app(&cfg);
    let s = reject_until_done(&app, start(&app).await).await;
    let (status, v) = call(&app, "POST", &format!("/sessions/{}/retrieve", s.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!({"suggestions": []}));
}

#[tokio::test]
async fn restart_reloads_identical_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let first = app(&cfg);
    let s = start(&first).await;
    let pick = s.suggestions[1].slot_id.clone();
    let (status, _) = call(&first, "POST", &format!("/sessions/{}/feedback", s.id), Some(json!({"selected": [pick], "rejected": []}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, before) = call(&first, "GET", &format!("/sessions/{}", s.id), None).await;
    let (_, profile_before) = call(&first, "GET", "/profile/activity/hike", None).await;
    drop(first);

    let second = app(&cfg);
    let (status, after) = call(&second, "GET", &format!("/sessions/{}", s.id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(before, after);
    let (_, profile_after) = call(&second, "GET", "/profile/activity/hike", None).await;
    assert_eq!(profile_before, profile_after);
}

#[tokio::test]
async fn ontology_and_profile() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&config(dir.path()));
    let (status, v) = call(&app, "GET", "/ontology", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["intents"].as_array().unwrap().len(), 14);

    let (status, v) = call(&app, "GET", "/profile/activity/hike", None).await;
    assert_eq!(status, StatusCode::OK);
    let p: ProfileView = serde_json::from_value(v).unwrap();
    assert_eq!(p.slots.len(), 20);
    let total: f64 = p.slots.iter().map(|s| s.probability).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!((p.threshold - 0.05).abs() < 1e-12);

    let (status, v) = call(&app, "GET", "/profile/activity/unicycling", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "not_found");
}

#[tokio::test]
async fn cors_is_configurable() {
    let dir = tempfile::tempdir().unwrap();
    let origin = "http://localhost:4200";
    let with = app(&ServerConfig {
        cors_origins: vec![origin.into()],
        ..config(dir.path())
    });
    let req = Request::get("/ontology").header(header::ORIGIN, origin).body(Body::empty()).unwrap();
    let resp = with.oneshot(req).await.unwrap();
    assert_eq!(resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).unwrap(), origin);

    let without = app(&config(dir.path()));
    let req = Request::get("/ontology").header(header::ORIGIN, origin).body(Body::empty()).unwrap();
    let resp = without.oneshot(req).await.unwrap();
    assert!(resp.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_feedback_is_serialized() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&config(dir.path()));
    let s = start(&app).await;
    let uri = format!("/sessions/{}/feedback", s.id);
    let body = json!({"selected": [s.suggestions[0].slot_id], "rejected": [s.suggestions[1].slot_id]});
    let mut tasks = Vec::new();
    for _ in 0..8 {
        let (app, uri, body) = (app.clone(), uri.clone(), body.clone());
        tasks.push(tokio::spawn(async move { call(&app, "POST", &uri, Some(body)).await.0 }));
    }
    let mut ok = 0;
    for t in tasks {
        let status = t.await.unwrap();
        if status == StatusCode::OK {
            ok += 1;
        } else {
            assert!(matches!(status, StatusCode::BAD_REQUEST | StatusCode::CONFLICT), "{status}");
        }
    }
    assert_eq!(ok, 1);
    let (_, v) = call(&app, "GET", &format!("/sessions/{}", s.id), None).await;
    assert_eq!(serde_json::from_value::<ApiSession>(v).unwrap().step, 1);
}

#[tokio::test]
async fn unknown_route_uses_error_body() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&config(dir.path()));
    let (status, v) = call(&app, "GET", "/nowhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "not_found");
}

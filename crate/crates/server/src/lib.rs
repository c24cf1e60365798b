//! JSON-over-HTTP front end for the refinement engine.
//!
//! Sessions live as one JSON file each under the data directory, so a
//! restarted server picks up where it left off. Calls that touch the same
//! session are serialized by a per-session lock; engine work runs on the
//! blocking pool because providers use blocking HTTP clients.

mod config;
mod error;
mod store;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use intentloop_core::frame::SemanticFrame;
use intentloop_core::session::{write_session_log, Engine, Session, SessionState};
use intentloop_core::{Error, IntentKey, Result};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use config::{ServerConfig, DEFAULT_EMBEDDING_DIM, DEFAULT_PORT};
pub use error::{ApiError, ErrorBody};
pub use store::SessionStore;

#[derive(Debug, Clone, Deserialize)]
pub struct CreateSession {
    pub text: String,
    #[serde(default)]
    pub location: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Feedback {
    #[serde(default)]
    pub selected: Vec<String>,
    #[serde(default)]
    pub rejected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSlot {
    pub slot_id: String,
    pub label: String,
}

/// The client's view of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSession {
    pub id: String,
    pub frame: Option<SemanticFrame>,
    pub ics: f64,
    pub threshold: f64,
    pub step: u32,
    pub state: SessionState,
    pub suggestions: Vec<ApiSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiSuggestion {
    pub title: String,
    pub url: String,
    pub snippet: String,
    pub score: f64,
    pub matched_slots: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub suggestions: Vec<ApiSuggestion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSlot {
    pub slot_id: String,
    pub label: String,
    pub count: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileView {
    pub topic: String,
    pub intent: String,
    pub threshold: f64,
    pub slots: Vec<ProfileSlot>,
}

struct Inner {
    engine: Engine,
    store: SessionStore,
    data_dir: PathBuf,
    persist: Mutex<()>,
}

/// Shared handler state.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(engine: Engine, data_dir: impl Into<PathBuf>) -> Self {
        let data_dir = data_dir.into();
        Self {
            inner: Arc::new(Inner {
                engine,
                store: SessionStore::new(&data_dir),
                data_dir,
                persist: Mutex::new(()),
            }),
        }
    }

    pub fn engine(&self) -> &Engine {
        &self.inner.engine
    }

    pub fn data_dir(&self) -> &Path {
        &self.inner.data_dir
    }
}

impl Inner {
    fn view(&self, s: &Session) -> ApiSession {
        let ontology = self.engine.ontology();
        ApiSession {
            id: s.id.clone(),
            frame: s.frame.clone(),
            ics: s.ics,
            threshold: s.threshold,
            step: s.step,
            state: s.state,
            suggestions: s
                .suggestions
                .iter()
                .map(|id| ApiSlot {
                    slot_id: id.clone(),
                    label: ontology.slot(id).map(|x| x.label.clone()).unwrap_or_default(),
                })
                .collect(),
        }
    }

    /// Saves the shared profile, the session's bandit model and its log.
    fn persist_learning(&self, session: &Session) -> Result<(), ApiError> {
        let _guard = self.persist.lock();
        store::save_profile(&config::profile_path(&self.data_dir), &self.engine.profile().snapshot())?;
        if let Some(key) = session.key() {
            if let Some(model) = self.engine.registry(session.scheme).get(&key) {
                let model = model.lock().clone();
                store::save_model(&config::models_dir(&self.data_dir), &model)?;
            }
        }
        write_session_log(&self.data_dir.join("logs"), session)?;
        Ok(())
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed body: {e}")))
}

async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Inner) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let inner = state.inner.clone();
    tokio::task::spawn_blocking(move || f(&inner))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSession = parse_body(&body)?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("text must not be empty"));
    }
    let view = blocking(&state, move |inner| {
        let session = inner.engine.start_session(&req.text, req.location)?;
        if session.frame.is_none() {
            let detail = session.diagnostic.unwrap_or_else(|| "unknown intent".into());
            return Err(ApiError::unknown_intent(detail));
        }
        inner.store.save(&session)?;
        Ok(inner.view(&session))
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<ApiSession>, ApiError> {
    blocking(&state, move |inner| {
        let lock = inner.store.lock_for(&id);
        let _guard = lock.lock();
        Ok(Json(inner.view(&inner.store.load(&id)?)))
    })
    .await
}

async fn feedback(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<ApiSession>, ApiError> {
    let fb: Feedback = parse_body(&body)?;
    blocking(&state, move |inner| {
        let lock = inner.store.lock_for(&id);
        let _guard = lock.lock();
        let mut session = inner.store.load(&id)?;
        let before = session.clone();
        let outcome = inner.engine.apply_feedback(&mut session, &fb.selected, &fb.rejected);
        if session != before {
            inner.store.save(&session)?;
        }
        outcome?;
        inner.persist_learning(&session)?;
        Ok(Json(inner.view(&session)))
    })
    .await
}

fn api_suggestions(s: &Session) -> RetrieveResponse {
    RetrieveResponse {
        suggestions: s
            .results
            .iter()
            .map(|r| ApiSuggestion {
                title: r.document.title.clone(),
                url: r.document.url.clone(),
                snippet: r.document.snippet.clone(),
                score: r.score,
                matched_slots: r.matched_slots.clone(),
            })
            .collect(),
    }
}

async fn retrieve(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<RetrieveResponse>, ApiError> {
    blocking(&state, move |inner| {
        let lock = inner.store.lock_for(&id);
        let _guard = lock.lock();
        let mut session = inner.store.load(&id)?;
        if session.state != SessionState::Retrieved {
            let before = session.clone();
            let outcome = inner.engine.retrieve(&mut session);
            if session != before {
                inner.store.save(&session)?;
            }
            outcome?;
        }
        Ok(Json(api_suggestions(&session)))
    })
    .await
}

async fn ontology(State(state): State<AppState>) -> Response {
    (
        [(header::CONTENT_TYPE, "application/json")],
        state.engine().ontology().to_json_string(),
    )
        .into_response()
}

async fn profile(
    State(state): State<AppState>,
    UrlPath((topic, intent)): UrlPath<(String, String)>,
) -> Result<Json<ProfileView>, ApiError> {
    let engine = state.engine();
    let ontology = engine.ontology();
    let key = IntentKey::new(&topic, &intent);
    if ontology.intent(&key).is_none() {
        return Err(ApiError::not_found(format!("no intent {key}")));
    }
    let (dist, threshold, counts) = engine.profile().read(|p| -> Result<_> {
        let dist = p.distribution(ontology, &key)?;
        let counts: Vec<u64> = dist.iter().map(|(id, _)| p.count(&key, id)).collect();
        Ok((dist, p.stopping_threshold(ontology, &key)?, counts))
    })?;
    let slots = dist
        .into_iter()
        .zip(counts)
        .map(|((slot_id, probability), count)| ProfileSlot {
            label: ontology.slot(&slot_id).map(|s| s.label.clone()).unwrap_or_default(),
            slot_id,
            count,
            probability,
        })
        .collect();
    Ok(Json(ProfileView {
        topic,
        intent,
        threshold,
        slots,
    }))
}

async fn fallback() -> ApiError {
    ApiError::not_found("no such endpoint")
}

fn cors_layer(origins: &[String]) -> Result<Option<CorsLayer>> {
    if origins.is_empty() {
        return Ok(None);
    }
    let allow = if origins.iter().any(|o| o == "*") {
        AllowOrigin::any()
    } else {
        let values = origins
            .iter()
            .map(|o| {
                HeaderValue::from_str(o).map_err(|_| Error::Validation(format!("bad CORS origin {o:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        AllowOrigin::list(values)
    };
    Ok(Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
            .allow_headers([header::CONTENT_TYPE]),
    ))
}

/// The API routes over `state`, with CORS for `cors_origins`.
pub fn router(state: AppState, cors_origins: &[String]) -> Result<Router> {
    let router = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/retrieve", post(retrieve))
        .route("/ontology", get(ontology))
        .route("/profile/{topic}/{intent}", get(profile))
        .fallback(fallback)
        .with_state(state);
    Ok(match cors_layer(cors_origins)? {
        Some(layer) => router.layer(layer),
        None => router,
    })
}

async fn shutdown_signal() {
    if let Err(e) = tokio::signal::ctrl_c().await {
        log::warn!("cannot listen for ctrl-c: {e}");
        std::future::pending::<()>().await;
    }
}

/// Builds the engine and serves until interrupted. Blocks the caller.
pub fn run(config: &ServerConfig) -> Result<()> {
    let engine = config.build_engine()?;
    let state = AppState::new(engine, &config.data_dir);
    let app = router(state.clone(), &config.cors_origins)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Transport {
            attempts: 1,
            message: format!("cannot start runtime: {e}"),
        })?;
    let served = runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on {}", listener.local_addr()?);
        axum::serve(listener, app).with_graceful_shutdown(shutdown_signal()).await
    });
    drop(runtime);
    // Dropped outside the runtime: blocking HTTP clients must not be dropped
    // from async context.
    drop(state);
    served.map_err(|e| Error::Transport {
        attempts: 1,
        message: format!("server on {addr}: {e}"),
    })
}

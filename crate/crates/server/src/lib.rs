//! JSON/WAV review queue over a [`ReviewStore`].
//!
//! Every state change goes through `POST /api/candidates/{id}/decision`,
//! which appends to the decision log under a single mutex. Reads take a
//! snapshot under the same mutex and never mutate anything.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::json;

use manatee_core::audio_io::{self, WavEncoding};
use manatee_core::dataset::{self, DatasetManifest, WINDOW_S};
use manatee_core::dsp::{self, FeatureExtractor, NormStats};
use manatee_core::feedback::{self, Candidate, Decision, ReviewStore, Status};
use manatee_core::{model, Error};

pub const DEFAULT_PAGE_LIMIT: usize = 50;
pub const MAX_PAGE_LIMIT: usize = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    /// Directory holding `<session>.wav` files.
    pub registry: PathBuf,
    pub store: PathBuf,
}

pub struct AppState {
    store: Mutex<ReviewStore>,
    manifest: DatasetManifest,
    stats: NormStats,
    registry: PathBuf,
}

fn require(path: &Path, what: &str) -> manatee_core::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Argument(format!("{what} {} does not exist", path.display())))
    }
}

impl AppState {
    pub fn new(store: ReviewStore, manifest: DatasetManifest, stats: NormStats, registry: PathBuf) -> Self {
        AppState {
            store: Mutex::new(store),
            manifest,
            stats,
            registry,
        }
    }

    /// Opens every artifact named by the config; all of them must exist.
    pub fn load(cfg: &ServerConfig) -> manatee_core::Result<Self> {
        require(&cfg.manifest, "manifest")?;
        require(&cfg.checkpoint, "checkpoint")?;
        require(&cfg.store, "review store")?;
        if !cfg.registry.is_dir() {
            return Err(Error::Argument(format!("registry {} is not a directory", cfg.registry.display())));
        }
        let manifest = dataset::load_manifest(&cfg.manifest)?;
        let ckpt = model::load_checkpoint(&cfg.checkpoint)?;
        let stats = match ckpt.norm_stats {
            Some(s) => s,
            None => manifest.norm_stats()?,
        };
        let store = ReviewStore::open(&cfg.store)?;
        Ok(Self::new(store, manifest, stats, cfg.registry.clone()))
    }

    fn store(&self) -> Result<MutexGuard<'_, ReviewStore>, ApiError> {
        self.store
            .lock()
            .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", "review store lock poisoned"))
    }

    fn candidate(&self, id: &str) -> Result<Candidate, ApiError> {
        self.store()?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no candidate `{id}`")))
    }

    /// The candidate's 1 s window, read straight from its session WAV.
    fn window(&self, c: &Candidate) -> Result<audio_io::AudioClip, ApiError> {
        let path = self.registry.join(format!("{}.wav", c.session_id));
        if !path.is_file() {
            return Err(ApiError::new(
                StatusCode::GONE,
                "gone",
                format!("source audio for session `{}` is missing", c.session_id),
            ));
        }
        let start = audio_io::seconds_to_samples(c.window_start_s);
        audio_io::load_wav_window(&path, start, audio_io::seconds_to_samples(WINDOW_S)).map_err(ApiError::from)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            error,
            detail: detail.into(),
        }
    }

    fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, error) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            Error::Argument(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        if status.is_server_error() {
            log::error!("{e}");
        }
        ApiError::new(status, error, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.error, "detail": self.detail }))).into_response()
    }
}

/// Runs blocking work (file reads, FFTs, fsync) off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateItem {
    pub id: String,
    pub score: f64,
    pub session_id: String,
    pub window_start_s: f64,
    pub status: Status,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CandidatePage {
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<CandidateItem>,
}

fn parse_count(q: &HashMap<String, String>, key: &str, default: usize) -> Result<usize, ApiError> {
    match q.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::bad_request(format!("`{key}` must be a non-negative integer, got `{v}`"))),
    }
}

async fn list_candidates(State(app): State<Arc<AppState>>, Query(q): Query<HashMap<String, String>>) -> Result<Json<CandidatePage>, ApiError> {
    let status = match q.get("status").map(String::as_str) {
        None => Some(Status::Pending),
        Some("all") => None,
        Some(s) => Some(s.parse::<Status>().map_err(|e| ApiError::bad_request(e.to_string()))?),
    };
    let offset = parse_count(&q, "offset", 0)?;
    let limit = parse_count(&q, "limit", DEFAULT_PAGE_LIMIT)?;
    if limit == 0 || limit > MAX_PAGE_LIMIT {
        return Err(ApiError::bad_request(format!("`limit` must be in 1..={MAX_PAGE_LIMIT}")));
    }
    let all = app.store()?.candidates(status);
    let items = all
        .iter()
        .skip(offset)
        .take(limit)
        .map(|c| CandidateItem {
            id: c.id.clone(),
            score: c.score,
            session_id: c.session_id.clone(),
            window_start_s: c.window_start_s,
            status: c.status,
        })
        .collect();
    Ok(Json(CandidatePage {
        total: all.len(),
        offset,
        limit,
        items,
    }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Spectrogram {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, mel bins by frames, normalized as the model sees them.
    pub values: Vec<f64>,
    pub mel_center_hz: Vec<f64>,
    pub seconds_per_frame: f64,
}

async fn spectrogram(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Spectrogram>, ApiError> {
    blocking(move || {
        let c = app.candidate(&id)?;
        let clip = app.window(&c)?;
        let ex = FeatureExtractor::shared();
        let feature = dsp::normalize(&ex.log_mel(&clip)?, &app.stats)?;
        let (rows, cols) = feature.shape();
        Ok(Json(Spectrogram {
            rows,
            cols,
            values: feature.values,
            mel_center_hz: ex.filterbank().centers_hz.clone(),
            seconds_per_frame: dsp::HOP as f64 / audio_io::SAMPLE_RATE_HZ as f64,
        }))
    })
    .await
}

async fn audio(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let bytes = blocking(move || {
        let c = app.candidate(&id)?;
        Ok(audio_io::wav_bytes(&app.window(&c)?, WavEncoding::Pcm16)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    decision: String,
    #[serde(default)]
    note: Option<String>,
}

async fn decide(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Candidate>, ApiError> {
    let body: DecisionBody = serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid body: {e}")))?;
    let decision: Decision = body.decision.parse().map_err(|e: Error| ApiError::bad_request(e.to_string()))?;
    blocking(move || {
        let updated = app.store()?.decide(&id, decision, body.note, Utc::now())?;
        log::info!("{id}: {:?}", updated.status);
        Ok(Json(updated))
    })
    .await
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub n_pos: usize,
    pub n_neg: usize,
    pub positive_rate: f64,
    pub train_n_pos: usize,
    pub train_n_neg: usize,
}

impl DatasetCounts {
    fn of(m: &DatasetManifest) -> Self {
        let total = m.total_counts();
        let train = m.counts().train;
        DatasetCounts {
            n_pos: total.n_pos,
            n_neg: total.n_neg,
            positive_rate: total.positive_rate(),
            train_n_pos: train.n_pos,
            train_n_neg: train.n_neg,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Stats {
    pub pending: usize,
    pub confirmed: usize,
    pub rejected: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub positive_rate: f64,
    /// Counts after applying the confirmations recorded so far.
    pub projected: DatasetCounts,
}

async fn stats(State(app): State<Arc<AppState>>) -> Result<Json<Stats>, ApiError> {
    blocking(move || {
        let store = app.store()?;
        let projected = feedback::apply_decisions(&app.manifest, &store)?;
        let current = DatasetCounts::of(&app.manifest);
        Ok(Json(Stats {
            pending: store.count(Status::Pending),
            confirmed: store.count(Status::Confirmed),
            rejected: store.count(Status::Rejected),
            n_pos: current.n_pos,
            n_neg: current.n_neg,
            positive_rate: current.positive_rate,
            projected: DatasetCounts::of(&projected),
        }))
    })
    .await
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/candidates", get(list_candidates))
        .route("/api/candidates/{id}/spectrogram", get(spectrogram))
        .route("/api/candidates/{id}/audio", get(audio))
        .route("/api/candidates/{id}/decision", post(decide))
        .route("/api/stats", get(stats))
        .with_state(state)
}

/// Serves until Ctrl-C. `ready` receives the bound address once the
/// listener accepts connections.
pub async fn serve(cfg: &ServerConfig, ready: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let state = AppState::load(cfg).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(cfg.bind).await?;
    let addr = listener.local_addr()?;
    log::info!("review server listening on {addr}");
    ready(addr);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

//! HTTP front end for chat sessions.
//!
//! POST /sessions, POST /sessions/{id}/turns, GET /sessions/{id}. Sessions live
//! in memory; each one sits behind its own lock so turns on one session are
//! serialized while different sessions proceed in parallel.

use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use tokio::sync::{Mutex, RwLock};
use tower_http::cors::{Any, CorsLayer};

use personalink::corpus::Pkb;
use personalink::encoder::{load_checkpoint, Role};
use personalink::linkdata::ExpansionPolicy;
use personalink::oracles::{Expander, Lexicon, StubExpander};
use personalink::pipeline::PipelineConfig;
use personalink::retrieval::{AugmentPolicy, Linker, PkbIndex};
use personalink::service::{load_response_bank, ChatSession, CreateRequest, Engine, EngineSettings, TurnResult};
use personalink::Error;

#[derive(clap::Args, Debug, Clone)]
pub struct ServeOpts {
    #[arg(long)]
    pub chat_ckpt: PathBuf,
    #[arg(long)]
    pub link_ckpt: PathBuf,
    #[arg(long)]
    pub pkb_index: PathBuf,
    /// Text file with one reply per line, or a chat JSONL split.
    #[arg(long)]
    pub response_bank: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Training PKB; when given the index is checked against it.
    #[arg(long)]
    pub pkb: Option<PathBuf>,
    /// Stub lexicon for query expansion when no config is given.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub bank_cap: Option<usize>,
    #[arg(long)]
    pub context_tokens: Option<usize>,
    /// Link on "user turn + reply" rather than the reply alone.
    #[arg(long)]
    pub query_includes_user: bool,
    /// Allowed browser origin; any origin when unset.
    #[arg(long)]
    pub cors_origin: Option<String>,
    /// Built web client to serve under /.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

/// Loads checkpoints, index and bank. Settings and query expansion come
/// from the pipeline config when one is given.
pub fn load_engine(opts: &ServeOpts, cfg: Option<&PipelineConfig>) -> personalink::Result<Engine> {
    let chat = Arc::new(load_checkpoint(&opts.chat_ckpt, Some(Role::Chat))?);
    let link = Arc::new(load_checkpoint(&opts.link_ckpt, Some(Role::Link))?);
    let index = Arc::new(PkbIndex::load(&opts.pkb_index)?);
    let expanded_index = index.encoded_texts != index.texts;

    let (policy, expansion): (AugmentPolicy, Option<(Arc<dyn Expander>, ExpansionPolicy)>) = match cfg {
        Some(c) => {
            let ex = if expanded_index { Some((c.oracles()?.expander, c.expansion.clone())) } else { None };
            (c.augment.clone(), ex)
        }
        None => {
            let ex: Option<(Arc<dyn Expander>, ExpansionPolicy)> = match &opts.lexicon {
                Some(p) => Some((Arc::new(StubExpander::new(&Lexicon::load(p)?)), ExpansionPolicy::default())),
                None => None,
            };
            (AugmentPolicy::default(), ex)
        }
    };
    if expanded_index && expansion.is_none() {
        return Err(Error::invalid("the persona index holds expanded text; pass --config or --lexicon for query expansion"));
    }
    let linker = Linker::new(link, index, policy, if expanded_index { expansion } else { None })?;

    let mut settings = EngineSettings { query_includes_user: opts.query_includes_user, ..Default::default() };
    if let Some(c) = cfg {
        settings.context_tokens = c.chat.context_tokens;
        settings.max_tokens = c.chat.max_tokens;
        settings.shown_candidates = c.eval.pool_size;
    }
    if let Some(n) = opts.context_tokens {
        settings.context_tokens = n;
    }
    let pkb = opts.pkb.as_ref().map(|p| Pkb::load(p)).transpose()?;
    let bank = load_response_bank(&opts.response_bank, opts.bank_cap)?;
    Engine::new(chat, linker, bank, pkb.as_ref(), settings)
}

pub struct AppState {
    engine: Engine,
    sessions: RwLock<HashMap<String, Arc<Mutex<ChatSession>>>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Arc<Self> {
        Arc::new(AppState { engine, sessions: RwLock::new(HashMap::new()) })
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Internal(String),
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => ApiError::BadRequest(m),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (code, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnRequest {
    pub text: String,
    /// Switches augmentation before this turn; earlier links stay.
    #[serde(default)]
    pub augmentation: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TurnReply {
    #[serde(flatten)]
    pub turn: TurnResult,
    pub session: ChatSession,
}

async fn create_session(State(st): State<Arc<AppState>>, body: Option<Json<CreateRequest>>) -> Result<(StatusCode, Json<ChatSession>), ApiError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let id = uuid::Uuid::new_v4().simple().to_string();
    let session = st.engine.create(id.clone(), &req, chrono::Utc::now())?;
    st.sessions.write().await.insert(id, Arc::new(Mutex::new(session.clone())));
    Ok((StatusCode::CREATED, Json(session)))
}

async fn lookup(st: &AppState, id: &str) -> Result<Arc<Mutex<ChatSession>>, ApiError> {
    st.sessions.read().await.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("no session `{id}`")))
}

async fn post_turn(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(req): Json<TurnRequest>) -> Result<Json<TurnReply>, ApiError> {
    let slot = lookup(&st, &id).await?;
    let mut session = slot.lock().await;
    // work on a copy so a failed turn leaves the session untouched
    let mut next = session.clone();
    if let Some(on) = req.augmentation {
        next.augmentation = on;
    }
    let turn = st.engine.post_user_turn(&mut next, &req.text)?;
    *session = next;
    Ok(Json(TurnReply { turn, session: session.clone() }))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<ChatSession>, ApiError> {
    let slot = lookup(&st, &id).await?;
    let s = slot.lock().await.clone();
    Ok(Json(s))
}

async fn health(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "models": st.engine.digests(), "bank": st.engine.bank_len() }))
}

pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> Result<Router, String> {
    let cors = match cors_origin {
        Some(o) => CorsLayer::new().allow_origin(o.parse::<HeaderValue>().map_err(|e| format!("bad origin `{o}`: {e}"))?),
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Ok(Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/turns", post(post_turn))
        .with_state(state)
        .layer(cors))
}

pub async fn serve(opts: ServeOpts, cfg: Option<PipelineConfig>) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let engine = load_engine(&opts, cfg.as_ref())?;
    log::info!("loaded chat {} link {} with {} bank replies", &engine.digests().chat[..12], &engine.digests().link[..12], engine.bank_len());
    let mut app = router(AppState::new(engine), opts.cors_origin.as_deref())?;
    if let Some(dir) = &opts.static_dir {
        app = app.fallback_service(tower_http::services::ServeDir::new(dir));
    }
    let listener = tokio::net::TcpListener::bind((opts.host.as_str(), opts.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

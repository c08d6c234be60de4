//! JSON-over-HTTP top-k endpoint over an immutable model snapshot, plus
//! the external embedding-provider client for raw query text.
//!
//! The snapshot (checkpoint, tables, precomputed item latents) is fully
//! loaded before the listener opens; requests never observe partial state.

use std::sync::Arc;
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use jam_core::checkpoint::{load_checkpoint, CheckpointModel};
use jam_core::model::PreparedJam;

use crate::commands::{load_world, LoadedWorld};
use crate::config::AppConfig;
use crate::CliError;

const PROVIDER_TIMEOUT: Duration = Duration::from_secs(5);

pub struct ServeState {
    prepared: PreparedJam,
    world: LoadedWorld,
    checkpoint_name: String,
    embed_url: Option<String>,
    http: reqwest::Client,
}

#[derive(Debug, Deserialize)]
pub struct RecommendRequest {
    #[serde(default)]
    pub user_id: Option<String>,
    #[serde(default)]
    pub query_id: Option<String>,
    #[serde(default)]
    pub query_text: Option<String>,
    pub k: usize,
}

#[derive(Debug, Serialize)]
pub struct ItemScore {
    pub item_id: String,
    pub score: f32,
}

#[derive(Debug, Serialize)]
pub struct RecommendResponse {
    pub items: Vec<ItemScore>,
    pub model: String,
    pub mixer: String,
}

#[derive(Serialize)]
struct ProviderReq<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ProviderResp {
    vector: Vec<f32>,
}

pub async fn embed_query_with(
    client: &reqwest::Client,
    url: &str,
    text: &str,
) -> Result<Vec<f32>, CliError> {
    let resp = client
        .post(url)
        .json(&ProviderReq { text })
        .send()
        .await
        .map_err(|e| CliError::Provider(format!("embedding provider request failed: {e}")))?;
    if !resp.status().is_success() {
        return Err(CliError::Provider(format!(
            "embedding provider returned status {}",
            resp.status()
        )));
    }
    let body: ProviderResp = resp
        .json()
        .await
        .map_err(|e| CliError::Provider(format!("embedding provider sent a bad body: {e}")))?;
    Ok(body.vector)
}

/// One-shot provider call with the default 5 s timeout.
pub async fn embed_query(url: &str, text: &str) -> Result<Vec<f32>, CliError> {
    let client = reqwest::Client::builder()
        .timeout(PROVIDER_TIMEOUT)
        .build()
        .map_err(|e| CliError::Provider(e.to_string()))?;
    embed_query_with(&client, url, text).await
}

type HandlerError = (StatusCode, Json<serde_json::Value>);

fn err(status: StatusCode, msg: impl Into<String>) -> HandlerError {
    (status, Json(json!({ "error": msg.into() })))
}

async fn healthz(State(st): State<Arc<ServeState>>) -> Json<serde_json::Value> {
    let p = st.prepared.params();
    Json(json!({
        "status": "ok",
        "model_kind": "jam",
        "mixer": p.mixer.name(),
        "d": p.d,
        "checkpoint": st.checkpoint_name,
        "n_items": st.world.catalog.n_items(),
        "modalities": st.world.catalog.modality_names(),
    }))
}

async fn recommend(
    State(st): State<Arc<ServeState>>,
    payload: Result<Json<RecommendRequest>, JsonRejection>,
) -> Result<Json<RecommendResponse>, HandlerError> {
    let Json(req) = payload
        .map_err(|e| err(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    if req.k < 1 {
        return Err(err(StatusCode::BAD_REQUEST, "k must be >= 1"));
    }
    let raw_query: Vec<f32> = match (&req.query_id, &req.query_text) {
        (Some(_), Some(_)) => {
            return Err(err(
                StatusCode::BAD_REQUEST,
                "pass exactly one of query_id / query_text, not both",
            ))
        }
        (None, None) => {
            return Err(err(StatusCode::BAD_REQUEST, "pass one of query_id / query_text"))
        }
        (Some(id), None) => {
            let idx = st.world.queries.lookup(id).ok_or_else(|| {
                err(StatusCode::NOT_FOUND, format!("unknown query_id {id:?}"))
            })?;
            st.world.queries.row(idx).to_vec()
        }
        (None, Some(text)) => {
            let url = st.embed_url.as_deref().ok_or_else(|| {
                err(StatusCode::BAD_REQUEST, "no embedding provider configured for query_text")
            })?;
            let v = embed_query_with(&st.http, url, text).await.map_err(|e| {
                // Retry-safe: the request was not applied anywhere.
                err(StatusCode::BAD_GATEWAY, format!("{e}; safe to retry"))
            })?;
            if v.len() != st.world.queries.dim() {
                return Err(err(
                    StatusCode::BAD_GATEWAY,
                    format!(
                        "provider dim {} != query table dim {}; safe to retry",
                        v.len(),
                        st.world.queries.dim()
                    ),
                ));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(err(
                    StatusCode::BAD_GATEWAY,
                    "provider returned non-finite values; safe to retry",
                ));
            }
            v
        }
    };
    let raw_user: Vec<f32> = match &req.user_id {
        Some(id) => {
            let idx = st
                .world
                .users
                .lookup(id)
                .ok_or_else(|| err(StatusCode::NOT_FOUND, format!("unknown user_id {id:?}")))?;
            st.world.users.row(idx).to_vec()
        }
        // No user: pure query translation from the origin.
        None => vec![0.0; st.world.users.dim()],
    };
    let ranked = st
        .prepared
        .rank(&raw_user, &raw_query, req.k)
        .map_err(|e| err(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(RecommendResponse {
        items: ranked
            .into_iter()
            .map(|(idx, score)| ItemScore {
                item_id: st.world.catalog.item_id(idx).to_string(),
                score,
            })
            .collect(),
        model: st.checkpoint_name.clone(),
        mixer: st.prepared.params().mixer.name().to_string(),
    }))
}

pub fn build_router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/recommend", post(recommend))
        .route("/healthz", get(healthz))
        .with_state(state)
}

pub fn build_state(cfg: &AppConfig) -> Result<ServeState, CliError> {
    let world = load_world(cfg)?;
    let path = cfg.require_path(&cfg.checkpoint, "checkpoint")?;
    let (model, _meta) = load_checkpoint(path)?;
    let CheckpointModel::Jam(params) = model else {
        return Err(CliError::Data("serve needs a jam checkpoint".into()));
    };
    let checkpoint_name = path
        .file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    let prepared = PreparedJam::new(&params, &world.catalog)?;
    let http = reqwest::Client::builder()
        .timeout(PROVIDER_TIMEOUT)
        .build()
        .map_err(|e| CliError::Provider(e.to_string()))?;
    Ok(ServeState {
        prepared,
        world,
        checkpoint_name,
        embed_url: cfg.embed_url.clone(),
        http,
    })
}

/// Load the snapshot, bind, announce the address on stdout, serve forever.
/// Port 0 asks the OS for an ephemeral port.
pub fn cmd_serve(cfg: &AppConfig, port_flag: Option<u16>) -> Result<(), CliError> {
    let state = Arc::new(build_state(cfg)?);
    let port = port_flag.or(cfg.port).unwrap_or(8080);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Data(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| CliError::Data(format!("cannot bind port {port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Data(e.to_string()))?;
        println!("listening on http://{addr}");
        use std::io::Write;
        std::io::stdout().flush().ok();
        axum::serve(listener, build_router(state))
            .await
            .map_err(|e| CliError::Data(e.to_string()))
    })
}

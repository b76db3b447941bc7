//! HTTP and WebSocket front end.
//!
//! ```text
//! GET    /health                 {"status":"ok","sessions":[...]}
//! POST   /sessions               {"bundle"?: path, "config"?: SessionConfig} -> {"id": n}
//! GET    /sessions/{id}/ws       frame stream; client text messages are commands
//! POST   /sessions/{id}/commands SteerCommand -> Ack
//! DELETE /sessions/{id}
//! ```

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::sync::broadcast::error::RecvError;

use crate::engine::SessionConfig;
use crate::error::SteerError;
use crate::protocol::{ServerMessage, SteerCommand};
use crate::service::SteerService;

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
pub struct StartRequest {
    pub bundle: Option<PathBuf>,
    pub config: Option<SessionConfig>,
}

impl IntoResponse for SteerError {
    fn into_response(self) -> Response {
        let status = match &self {
            SteerError::UnknownSession(_) => StatusCode::NOT_FOUND,
            SteerError::InvalidCommand(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SteerError::SessionEnded(_) => StatusCode::GONE,
            SteerError::Core(rhythmic_core::Error::BundleIncompatible(_)) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string(), "category": self.category() }))).into_response()
    }
}

pub fn router(service: Arc<SteerService>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(start))
        .route("/sessions/{id}", axum::routing::delete(stop))
        .route("/sessions/{id}/commands", post(command))
        .route("/sessions/{id}/ws", get(ws))
        .with_state(service)
}

async fn health(State(svc): State<Arc<SteerService>>) -> impl IntoResponse {
    Json(serde_json::json!({ "status": "ok", "sessions": svc.sessions() }))
}

async fn start(State(svc): State<Arc<SteerService>>, body: Option<Json<StartRequest>>) -> Result<impl IntoResponse, SteerError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let id = svc.start_session(req.bundle.as_deref(), req.config).await?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "id": id }))))
}

async fn stop(State(svc): State<Arc<SteerService>>, Path(id): Path<u64>) -> Result<StatusCode, SteerError> {
    svc.stop_session(id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn command(
    State(svc): State<Arc<SteerService>>,
    Path(id): Path<u64>,
    Json(cmd): Json<SteerCommand>,
) -> Result<impl IntoResponse, SteerError> {
    Ok(Json(svc.apply_command(id, cmd).await?))
}

async fn ws(State(svc): State<Arc<SteerService>>, Path(id): Path<u64>, upgrade: WebSocketUpgrade) -> Result<Response, SteerError> {
    let rx = svc.subscribe(id)?;
    Ok(upgrade.on_upgrade(move |socket| pump(socket, svc, id, rx)))
}

async fn pump(mut socket: WebSocket, svc: Arc<SteerService>, id: u64, mut rx: tokio::sync::broadcast::Receiver<Arc<ServerMessage>>) {
    loop {
        tokio::select! {
            msg = rx.recv() => {
                let msg = match msg {
                    Ok(m) => m,
                    Err(RecvError::Lagged(n)) => {
                        log::debug!("session {id}: subscriber skipped {n} frames");
                        continue;
                    }
                    Err(RecvError::Closed) => break,
                };
                let last = matches!(*msg, ServerMessage::Ended { .. });
                if socket.send(Message::Text(msg.to_line().into())).await.is_err() || last {
                    break;
                }
            }
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t,
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                let reply = match serde_json::from_str::<SteerCommand>(&text) {
                    Ok(cmd) => match svc.apply_command(id, cmd).await {
                        Ok(ack) => ServerMessage::Ack { ack },
                        Err(e) => ServerMessage::Error { error: e.to_string() },
                    },
                    Err(e) => ServerMessage::Error { error: format!("bad command: {e}") },
                };
                if socket.send(Message::Text(reply.to_line().into())).await.is_err() {
                    break;
                }
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(addr: SocketAddr, bundle_dir: PathBuf, defaults: SessionConfig, replay_dir: PathBuf) -> Result<(), SteerError> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| SteerError::PortInUse { addr, source })?;
    log::info!("listening on {}", listener.local_addr()?);
    let svc = Arc::new(SteerService::new(Some(bundle_dir), defaults, replay_dir));
    axum::serve(listener, router(svc)).await?;
    Ok(())
}

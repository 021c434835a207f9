//! HTTP and WebSocket front end.
//!
//! Routes:
//! - `POST /sessions` with optional `{"scenario": name, "ratio": r}` creates a session.
//! - `GET /sessions/{id}` returns its state, impulse log and summary.
//! - `GET /sessions/{id}/ws` upgrades to the frame stream; the first
//!   subscriber starts the loop.
//! - `GET /health`.
//!
//! With a static directory configured, every other path is served from it.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use sioms_core::scenario::Scenario;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tower_http::services::ServeDir;

use crate::protocol::{parse_inbound, ErrorCode, Outbound};
use crate::session::SessionManager;
use crate::LiveError;

pub const HEARTBEAT: Duration = Duration::from_secs(2);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub static_dir: Option<PathBuf>,
    /// Scenario for sessions that do not name one.
    pub scenario: Scenario,
    pub ratio: f64,
    /// Sessions that may be created or running at once.
    pub max_sessions: usize,
}

struct AppState {
    manager: SessionManager,
    scenario: Scenario,
    ratio: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRequest {
    scenario: Option<String>,
    ratio: Option<f64>,
}

impl IntoResponse for LiveError {
    fn into_response(self) -> Response {
        let code = self.code();
        let status = match code {
            ErrorCode::UnknownSession => StatusCode::NOT_FOUND,
            ErrorCode::ResourceLimit | ErrorCode::Busy => StatusCode::SERVICE_UNAVAILABLE,
            ErrorCode::InvalidState => StatusCode::CONFLICT,
            ErrorCode::Internal => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        let body = Outbound::error(code, self.to_string()).to_text();
        (status, [("content-type", "application/json")], body).into_response()
    }
}

/// A bound server, ready to run.
pub struct Server {
    listener: TcpListener,
    router: Router,
}

impl Server {
    pub async fn bind(config: ServerConfig) -> Result<Self, LiveError> {
        if !(config.ratio >= 0.0 && config.ratio.is_finite()) {
            return Err(LiveError::Ratio(config.ratio));
        }
        if config.scenario.rh.is_none() {
            return Err(LiveError::Scenario(format!("scenario {} has no [rh] section", config.scenario.name)));
        }
        let state = Arc::new(AppState { manager: SessionManager::new(config.max_sessions), scenario: config.scenario, ratio: config.ratio });
        let mut router = Router::new()
            .route("/health", get(|| async { "ok" }))
            .route("/sessions", post(create_session))
            .route("/sessions/{id}", get(session_info))
            .route("/sessions/{id}/ws", get(session_ws))
            .with_state(state);
        if let Some(dir) = config.static_dir {
            router = router.fallback_service(ServeDir::new(dir));
        }
        let listener = TcpListener::bind(config.listen).await.map_err(|e| LiveError::Io(format!("cannot listen on {}: {e}", config.listen)))?;
        Ok(Server { listener, router })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub async fn run(self) -> Result<(), LiveError> {
        axum::serve(self.listener, self.router).await.map_err(|e| LiveError::Io(e.to_string()))
    }
}

/// Binds and serves until the process ends, on a fresh runtime.
pub fn serve_blocking(config: ServerConfig) -> Result<(), LiveError> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| LiveError::Io(e.to_string()))?;
    rt.block_on(async {
        let server = Server::bind(config).await?;
        tracing::info!(addr = %server.local_addr(), "listening");
        println!("listening on http://{}", server.local_addr());
        server.run().await
    })
}

async fn create_session(State(app): State<Arc<AppState>>, body: Option<Json<CreateRequest>>) -> Result<Response, LiveError> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let scenario = match req.scenario.as_deref() {
        None => app.scenario.clone(),
        Some(name) if name == app.scenario.name => app.scenario.clone(),
        // only built-ins by name: a network client must not read local files
        Some(name) => Scenario::builtin(name).ok_or_else(|| LiveError::Scenario(format!("unknown scenario {name}")))?,
    };
    let ratio = req.ratio.unwrap_or(app.ratio);
    let manager = &app.manager;
    let id = tokio::task::block_in_place(|| manager.create(&scenario, ratio))?;
    let info = app.manager.info(&id)?;
    Ok((StatusCode::CREATED, Json(info)).into_response())
}

async fn session_info(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, LiveError> {
    Ok(Json(app.manager.info(&id)?).into_response())
}

async fn session_ws(State(app): State<Arc<AppState>>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Result<Response, LiveError> {
    app.manager.meta(&id)?;
    Ok(ws.on_upgrade(move |socket| connection(app, id, socket)))
}

async fn connection(app: Arc<AppState>, id: String, socket: WebSocket) {
    let (mut sink, mut stream) = socket.split();
    let (out_tx, mut out_rx) = mpsc::channel::<String>(64);

    // writer: direct replies, broadcast frames and heartbeats, one socket
    let sub = match app.manager.subscribe(&id) {
        Ok(s) => s,
        Err(e) => {
            let _ = sink.send(Message::Text(Outbound::error(e.code(), e.to_string()).to_text().into())).await;
            return;
        }
    };
    let writer_app = app.clone();
    let writer_id = id.clone();
    let writer = tokio::spawn(async move {
        if sink.send(Message::Text(sub.hello.to_text().into())).await.is_err() {
            return;
        }
        let Some(mut frames) = sub.frames else {
            if let Some(summary) = sub.summary {
                let _ = sink.send(Message::Text(Outbound::Summary(summary).to_text().into())).await;
            }
            let _ = sink.close().await;
            return;
        };
        let mut heartbeat = tokio::time::interval(HEARTBEAT);
        heartbeat.tick().await;
        loop {
            tokio::select! {
                frame = frames.recv() => match frame {
                    Ok(text) => {
                        if sink.send(Message::Text(text.as_ref().into())).await.is_err() {
                            return;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::warn!(session = %writer_id, skipped = n, "dropping slow subscriber");
                        let msg = Outbound::error(ErrorCode::Lagged, format!("subscriber fell {n} frames behind and was dropped"));
                        let _ = sink.send(Message::Text(msg.to_text().into())).await;
                        let _ = sink.close().await;
                        return;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                reply = out_rx.recv() => match reply {
                    Some(text) => {
                        if sink.send(Message::Text(text.into())).await.is_err() {
                            return;
                        }
                    }
                    None => return,
                },
                _ = heartbeat.tick() => {
                    let (state, t) = writer_app.manager.state(&writer_id).unwrap_or((crate::protocol::SessionState::Stopped, 0.0));
                    let hb = Outbound::Heartbeat { session: writer_id.clone(), state, t };
                    if sink.send(Message::Text(hb.to_text().into())).await.is_err() {
                        return;
                    }
                }
            }
        }
        // the stream ended; flush pending replies, then close
        while let Ok(text) = out_rx.try_recv() {
            let _ = sink.send(Message::Text(text.into())).await;
        }
        let _ = sink.close().await;
    });

    // reader: commands are awaited one at a time so replies keep their order
    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match parse_inbound(&text) {
            Ok(cmd) => match app.manager.command(&id, cmd).await {
                Ok(ack) => ack.to_frame(),
                Err(e) => Outbound::error(e.code(), e.to_string()),
            },
            Err(frame) => frame,
        };
        if out_tx.send(reply.to_text()).await.is_err() {
            break;
        }
    }
    drop(out_tx);
    let _ = writer.await;
}

//! WebSocket service: one loop session per connection.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::Notify;
use tokio::time::{sleep_until, Instant};

use jenkins_core::closed_loop::LoopConfig;
use jenkins_core::protocol::{FrameQueue, ServerMessage, ServiceSession};

#[derive(Clone, Copy, Debug)]
pub struct ServeOptions {
    /// Silence after which the session starts advancing at zero velocity.
    pub idle_after: Duration,
    /// Spacing of zero-velocity bins while the client stays silent.
    pub idle_period: Duration,
    /// Egress frames buffered per connection before the oldest are dropped.
    pub queue_capacity: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            idle_after: Duration::from_millis(200),
            idle_period: Duration::from_millis(20),
            queue_capacity: 1024,
        }
    }
}

pub struct AppState {
    config: Arc<LoopConfig>,
    options: ServeOptions,
    manifests: Value,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: LoopConfig, options: ServeOptions) -> Arc<Self> {
        let manifests = json!({
            "decoder": config.decoder.to_weight_file().manifest().unwrap_or(Value::Null),
            "encoder": config.encoder.to_weight_file().manifest().unwrap_or(Value::Null),
            "chain": config.chain.to_text(),
            "lambda": config.lambda,
            "anchor": config.anchor,
            "temperature": config.temperature,
            "seed": config.seed,
        });
        Arc::new(AppState {
            config: Arc::new(config),
            options,
            manifests,
            next_id: AtomicU64::new(0),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/model/info", get(model_info))
        .route("/ws", get(ws_upgrade))
        .with_state(state)
}

pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> anyhow::Result<()> {
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn model_info(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(state.manifests.clone())
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(state): State<Arc<AppState>>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| handle_socket(socket, state))
}

struct Egress {
    queue: Mutex<FrameQueue>,
    notify: Notify,
    closing: std::sync::atomic::AtomicBool,
}

impl Egress {
    fn push_all(&self, frames: Vec<ServerMessage>) {
        let mut q = self.queue.lock().expect("egress lock");
        for f in frames {
            q.push(f);
        }
        drop(q);
        self.notify.notify_one();
    }

    fn pop(&self) -> Option<ServerMessage> {
        self.queue.lock().expect("egress lock").pop()
    }
}

async fn handle_socket(socket: WebSocket, state: Arc<AppState>) {
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    tracing::info!(session = id, "connected");
    let (mut sink, mut stream) = socket.split();
    let egress = Arc::new(Egress {
        queue: Mutex::new(FrameQueue::new(state.options.queue_capacity)),
        notify: Notify::new(),
        closing: Default::default(),
    });

    let writer_egress = egress.clone();
    let writer = tokio::spawn(async move {
        loop {
            while let Some(frame) = writer_egress.pop() {
                if sink.send(Message::Text(frame.to_json())).await.is_err() {
                    return;
                }
            }
            if writer_egress.closing.load(Ordering::Acquire) {
                let _ = sink.send(Message::Close(None)).await;
                return;
            }
            writer_egress.notify.notified().await;
        }
    });

    let mut session = ServiceSession::new(id, state.config.clone());
    let opts = state.options;
    let mut deadline = Instant::now() + opts.idle_after;
    loop {
        let idle = session.is_ready();
        let reply = tokio::select! {
            biased;
            msg = stream.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    deadline = Instant::now() + opts.idle_after;
                    tokio::task::block_in_place(|| session.handle_text(&text))
                }
                Some(Ok(Message::Binary(_))) => {
                    egress.push_all(vec![ServerMessage::error("binary frames are not supported")]);
                    continue;
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => continue,
            },
            _ = sleep_until(deadline), if idle => {
                deadline = Instant::now() + opts.idle_period;
                tokio::task::block_in_place(|| session.idle_tick())
            }
        };
        let close = reply.close;
        egress.push_all(reply.frames);
        if close {
            break;
        }
    }
    egress.closing.store(true, Ordering::Release);
    egress.notify.notify_one();
    let _ = writer.await;
    tracing::info!(session = id, bins = session.bin(), "disconnected");
}

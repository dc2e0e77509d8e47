//! Real-time teaching sessions over WebSocket.
//!
//! Each connection owns one environment. At a fixed tick the session moves
//! the agent along the straight-line nominal path unless the client holds an
//! intervention, in which case the client's velocity is applied (held between
//! messages) and the step is labelled `p = 1`. Successful episodes are
//! appended to the dataset file by a single writer; failed ones are dropped.
//!
//! Wire protocol (JSON text frames):
//!
//! ```text
//! server → client
//!   {"type":"hello","protocol_version":1}
//!   {"type":"state","t":0,"agent":[x,y],"obstacle":[x,y],"goal":[x,y],"p":0.0,"status":"running"}
//!   {"type":"episode_end","success":true,"steps":57}
//!   {"type":"error","message":"..."}
//! client → server
//!   {"type":"hello","protocol_version":1}
//!   {"type":"intervene","active":true,"u":[vx,vy]}
//!   {"type":"reset"}
//! ```
//!
//! Coordinates and velocities are world units.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::data::{self, DatasetHeader, Episode, EpisodeMeta, Outcome, Source, StepVector};
use crate::env::{self, clamp_norm, EnvConfig, EnvState, Status, Vec2};
use crate::error::{Error, Result};
use crate::teacher::derive_seed;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello {
        protocol_version: u32,
    },
    State {
        t: usize,
        agent: Vec2,
        obstacle: Vec2,
        goal: Vec2,
        p: f64,
        status: SessionStatus,
    },
    EpisodeEnd {
        success: bool,
        steps: usize,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Hello {
        protocol_version: u32,
    },
    Intervene {
        active: bool,
        #[serde(default)]
        u: Option<Vec2>,
    },
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    ReachedGoal,
    Collided,
    TimedOut,
}

/// One teaching session: an environment, the held intervention, and the
/// steps recorded so far in the current episode.
#[derive(Debug, Clone)]
pub struct Session {
    pub session_id: u64,
    env_cfg: EnvConfig,
    base_seed: u64,
    episodes_started: u64,
    pub env: EnvState,
    pub status: SessionStatus,
    pub intervention_active: bool,
    pub pending_u: Option<Vec2>,
    pub recorded: Vec<StepVector>,
    last_p: f64,
}

/// Result of one tick.
#[derive(Debug, Default)]
pub struct TickOutput {
    pub messages: Vec<ServerMsg>,
    /// Set once when an episode ends successfully; ready to persist.
    pub finished: Option<Episode>,
}

impl Session {
    pub fn new(session_id: u64, env_cfg: EnvConfig, base_seed: u64) -> Self {
        let mut s = Self {
            session_id,
            env: env::reset(&env_cfg),
            env_cfg,
            base_seed,
            episodes_started: 0,
            status: SessionStatus::Running,
            intervention_active: false,
            pending_u: None,
            recorded: Vec::new(),
            last_p: 0.0,
        };
        s.start_episode();
        s
    }

    pub fn episode_seed(&self) -> u64 {
        self.env_cfg.seed
    }

    fn start_episode(&mut self) {
        let seed = derive_seed(self.base_seed ^ self.session_id.rotate_left(32), self.episodes_started);
        self.episodes_started += 1;
        self.env_cfg.seed = seed;
        self.env = env::reset(&self.env_cfg);
        self.status = SessionStatus::Running;
        self.intervention_active = false;
        self.pending_u = None;
        self.recorded.clear();
        self.last_p = 0.0;
    }

    pub fn state_message(&self) -> ServerMsg {
        ServerMsg::State {
            t: self.env.t,
            agent: self.env.agent,
            obstacle: self.env.obstacle,
            goal: self.env_cfg.goal,
            p: self.last_p,
            status: self.status,
        }
    }

    /// Applies one client frame. Malformed frames produce an error reply and
    /// leave the session untouched.
    pub fn handle_message(&mut self, text: &str) -> Vec<ServerMsg> {
        let msg: ClientMsg = match serde_json::from_str(text) {
            Ok(m) => m,
            Err(e) => {
                return vec![ServerMsg::Error {
                    message: format!("malformed message: {e}"),
                }]
            }
        };
        match msg {
            ClientMsg::Hello { protocol_version } if protocol_version == PROTOCOL_VERSION => {
                vec![ServerMsg::Hello {
                    protocol_version: PROTOCOL_VERSION,
                }]
            }
            ClientMsg::Hello { protocol_version } => vec![ServerMsg::Error {
                message: format!("unsupported protocol_version {protocol_version}, server speaks {PROTOCOL_VERSION}"),
            }],
            ClientMsg::Intervene { active, u } => {
                self.intervention_active = active;
                self.pending_u = if active { Some(u.unwrap_or([0.0, 0.0])) } else { None };
                vec![]
            }
            ClientMsg::Reset => {
                self.start_episode();
                vec![self.state_message()]
            }
        }
    }

    /// Advances the environment one step. Does nothing once the episode has
    /// ended.
    pub fn tick(&mut self) -> TickOutput {
        let mut out = TickOutput::default();
        if self.status != SessionStatus::Running {
            return out;
        }
        let (u, p) = match (self.intervention_active, self.pending_u) {
            (true, Some(u)) => (clamp_norm(u, self.env_cfg.agent_max_speed), 1.0),
            _ => (env::nominal_input(&self.env, &self.env_cfg), 0.0),
        };
        self.recorded.push(StepVector {
            s: self.env.observation(),
            u,
            p,
        });
        self.last_p = p;
        self.env = env::step(&self.env, u, &self.env_cfg).expect("session episode is running");
        self.status = if self.env.collided_ever {
            SessionStatus::Collided
        } else {
            match self.env.status {
                Status::Running => SessionStatus::Running,
                Status::ReachedGoal => SessionStatus::ReachedGoal,
                Status::Done => SessionStatus::TimedOut,
            }
        };
        out.messages.push(self.state_message());
        if self.status == SessionStatus::Running {
            return out;
        }
        let success = self.status == SessionStatus::ReachedGoal;
        out.messages.push(ServerMsg::EpisodeEnd {
            success,
            steps: self.env.t,
        });
        if success {
            let mut steps = self.recorded.clone();
            steps.push(StepVector {
                s: self.env.observation(),
                u: env::nominal_input(&self.env, &self.env_cfg),
                p: 0.0,
            });
            out.finished = Some(Episode {
                meta: EpisodeMeta {
                    episode_id: 0,
                    seed: self.env_cfg.seed,
                    source: Source::Human,
                    outcome: Outcome::ReachedGoal,
                },
                steps,
            });
        }
        out
    }
}

/// Serializes dataset appends through one thread.
pub struct DatasetWriter {
    tx: mpsc::Sender<Episode>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl DatasetWriter {
    pub fn spawn(path: PathBuf, header: DatasetHeader) -> Result<Self> {
        let mut next_id = if path.exists() {
            match data::load_dataset(&path) {
                Ok(d) => d.episodes.iter().map(|e| e.meta.episode_id + 1).max().unwrap_or(0),
                Err(Error::EmptyDataset) => 0,
                Err(e) => return Err(e),
            }
        } else {
            0
        };
        let (tx, rx) = mpsc::channel::<Episode>();
        let handle = std::thread::spawn(move || {
            for mut ep in rx {
                ep.meta.episode_id = next_id;
                match data::append_episode(&path, &header, &ep) {
                    Ok(()) => next_id += 1,
                    Err(e) => eprintln!("failed to persist episode: {e}"),
                }
            }
        });
        Ok(Self {
            tx,
            handle: Some(handle),
        })
    }

    pub fn sender(&self) -> mpsc::Sender<Episode> {
        self.tx.clone()
    }

    /// Waits until every queued episode is written. Blocks until all
    /// senders handed out by [`DatasetWriter::sender`] are dropped.
    pub fn finish(mut self) {
        drop(self.tx);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}



#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub env_cfg: EnvConfig,
    pub seed: u64,
    pub tick_hz: f64,
    pub dataset_path: PathBuf,
    pub assets_dir: Option<PathBuf>,
    pub run_config: Option<serde_json::Value>,
}

#[derive(Clone)]
struct AppState {
    env_cfg: EnvConfig,
    seed: u64,
    tick: Duration,
    sessions: Arc<AtomicU64>,
    writer: mpsc::Sender<Episode>,
}

async fn health() -> impl IntoResponse {
    Json(serde_json::json!({"status": "ok", "protocol_version": PROTOCOL_VERSION}))
}

async fn ws_upgrade(ws: WebSocketUpgrade, State(app): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| run_session(socket, app))
}

async fn send(socket: &mut WebSocket, msg: &ServerMsg) -> bool {
    let text = serde_json::to_string(msg).expect("server message serializes");
    socket.send(Message::Text(text.into())).await.is_ok()
}

async fn run_session(mut socket: WebSocket, app: AppState) {
    let id = app.sessions.fetch_add(1, Ordering::Relaxed);
    let mut session = Session::new(id, app.env_cfg.clone(), app.seed);
    if !send(&mut socket, &session.state_message()).await {
        return;
    }
    let mut ticker = tokio::time::interval(app.tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    ticker.tick().await;
    loop {
        tokio::select! {
            incoming = socket.recv() => {
                let text = match incoming {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => continue,
                };
                for reply in session.handle_message(&text) {
                    if !send(&mut socket, &reply).await {
                        return;
                    }
                }
            }
            _ = ticker.tick() => {
                let out = session.tick();
                if let Some(ep) = out.finished {
                    let _ = app.writer.send(ep);
                }
                for msg in &out.messages {
                    if !send(&mut socket, msg).await {
                        return;
                    }
                }
            }
        }
    }
}

pub fn router(opts: &ServeOptions, writer: &DatasetWriter) -> Router {
    let state = AppState {
        env_cfg: opts.env_cfg.clone(),
        seed: opts.seed,
        tick: Duration::from_secs_f64(1.0 / opts.tick_hz),
        sessions: Arc::new(AtomicU64::new(0)),
        writer: writer.sender(),
    };
    let app = Router::new()
        .route("/health", get(health))
        .route("/ws", get(ws_upgrade))
        .with_state(state);
    match &opts.assets_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.route("/", get(|| async { "teaching server: connect a client to /ws\n" })),
    }
}

/// Binds `addr` and serves until `shutdown` resolves.
pub async fn serve(
    opts: ServeOptions,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<()> {
    if !(opts.tick_hz > 0.0) {
        return Err(Error::Config("tick_hz must be positive".into()));
    }
    let mut header = DatasetHeader::new(&opts.env_cfg, opts.seed);
    header.config = opts.run_config.clone();
    let writer = DatasetWriter::spawn(opts.dataset_path.clone(), header)?;
    let app = router(&opts, &writer);
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("bind {addr}"), e))?;
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
        .map_err(|e| Error::io(format!("serve {addr}"), e))?;
    writer.finish();
    Ok(())
}

//! The daemon session and its TCP / WebSocket listeners.
//!
//! A daemon hosts exactly one session. Analyses run on the blocking pool;
//! while one runs, further `analyze` requests collapse into a single pending
//! rerun. Results are broadcast to every connected client in the order
//! `analysis_begin`, `key_metrics`, `breakdown`, `inline_markers`.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message as WsMessage;

use super::analysis::{run_analysis, AnalysisOptions, AnalysisResult};
use super::backend::{BackendError, ProfilerBackend, ReplayBackend, SubprocessBackend};
use crate::breakdown::{BreakdownError, NodePath, SortKey};
use crate::mutate::{mutate_file, LiteralSpan, MutationTarget};
use crate::protocol::{
    breakdown_nodes, decode_payload, encode_frame, encode_payload, handshake, FrameDecoder, Handshake,
    Message, ProtocolError, WireMarker, PROTOCOL_VERSION,
};

#[derive(Debug, Clone)]
pub enum BackendConfig {
    Replay { trace_path: PathBuf, delay: Duration },
    Subprocess { command_line: String },
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub project_root: PathBuf,
    /// Relative to `project_root`, or absolute inside it.
    pub entry_file: PathBuf,
    pub backend: BackendConfig,
    pub target: MutationTarget,
    pub capacity_override: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot resolve {path}: {message}")]
    Resolve { path: String, message: String },
    #[error("entry file {entry} is outside project root {root}")]
    OutsideRoot { entry: String, root: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn canonical(path: &Path) -> Result<PathBuf, ConfigError> {
    path.canonicalize().map_err(|e| ConfigError::Resolve {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Default)]
struct SessionState {
    running: bool,
    pending: bool,
    latest: Option<Arc<AnalysisResult>>,
    span: Option<LiteralSpan>,
}

pub struct Session {
    id: String,
    entry_path: PathBuf,
    entry_display: String,
    backend: Box<dyn ProfilerBackend>,
    options: AnalysisOptions,
    state: Mutex<SessionState>,
    clients: Mutex<BTreeMap<u64, mpsc::UnboundedSender<Message>>>,
    next_client: AtomicU64,
    // Serializes reads of the entry file by analyses against mutations.
    file_lock: Mutex<()>,
    runs_started: AtomicU64,
}

impl Session {
    pub fn new(config: SessionConfig) -> Result<Arc<Session>, ConfigError> {
        let root = canonical(&config.project_root)?;
        let entry_path = canonical(&root.join(&config.entry_file))?;
        let entry_rel = entry_path
            .strip_prefix(&root)
            .map_err(|_| ConfigError::OutsideRoot {
                entry: entry_path.display().to_string(),
                root: root.display().to_string(),
            })?
            .to_path_buf();

        let backend: Box<dyn ProfilerBackend> = match &config.backend {
            BackendConfig::Replay { trace_path, delay } => {
                Box::new(ReplayBackend::new(trace_path.clone()).with_delay(*delay))
            }
            BackendConfig::Subprocess { command_line } => Box::new(SubprocessBackend::from_command_line(
                command_line,
                root.clone(),
                entry_rel.clone(),
                config.capacity_override,
            )?),
        };

        Ok(Arc::new(Session {
            id: format!("{:016x}", rand::random::<u64>()),
            entry_display: entry_rel.to_string_lossy().into_owned(),
            options: AnalysisOptions {
                entry_file: Some(entry_path.clone()),
                target: config.target,
                user_batch: None,
                capacity_override: config.capacity_override,
            },
            entry_path,
            backend,
            state: Mutex::new(SessionState::default()),
            clients: Mutex::new(BTreeMap::new()),
            next_client: AtomicU64::new(0),
            file_lock: Mutex::new(()),
            runs_started: AtomicU64::new(0),
        }))
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn entry_file(&self) -> &str {
        &self.entry_display
    }

    /// Number of analyses started since the session was created.
    pub fn runs_started(&self) -> u64 {
        self.runs_started.load(Ordering::SeqCst)
    }

    pub fn latest(&self) -> Option<Arc<AnalysisResult>> {
        self.state.lock().unwrap().latest.clone()
    }

    pub fn is_idle(&self) -> bool {
        let state = self.state.lock().unwrap();
        !state.running && !state.pending
    }

    /// Adds a client and replays the latest results to it. Holding the
    /// client lock keeps the replay from interleaving with a broadcast.
    fn register(&self, out: mpsc::UnboundedSender<Message>) -> u64 {
        let id = self.next_client.fetch_add(1, Ordering::SeqCst);
        let mut clients = self.clients.lock().unwrap();
        if let Some(latest) = self.latest() {
            for message in result_messages(&latest) {
                let _ = out.send(message);
            }
        }
        clients.insert(id, out);
        id
    }

    fn unregister(&self, id: u64) {
        self.clients.lock().unwrap().remove(&id);
    }

    fn broadcast(&self, messages: &[Message]) {
        let mut clients = self.clients.lock().unwrap();
        clients.retain(|_, out| messages.iter().all(|m| out.send(m.clone()).is_ok()));
    }

    fn session_message(&self) -> Message {
        Message::Session {
            session_id: self.id.clone(),
            entry_file: self.entry_display.clone(),
            capabilities: vec![
                "analyze".into(),
                "set_batch_size".into(),
                "get_breakdown".into(),
            ],
        }
    }

    /// Starts an analysis, or marks one pending if an analysis is running.
    pub fn handle_analyze(self: &Arc<Self>) {
        let start = {
            let mut state = self.state.lock().unwrap();
            if state.running {
                state.pending = true;
                false
            } else {
                state.running = true;
                true
            }
        };
        if start {
            let session = Arc::clone(self);
            tokio::spawn(async move { session.analysis_loop().await });
        }
    }

    async fn analysis_loop(self: Arc<Self>) {
        loop {
            self.runs_started.fetch_add(1, Ordering::SeqCst);
            self.broadcast(&[Message::AnalysisBegin {}]);

            let session = Arc::clone(&self);
            let outcome = tokio::task::spawn_blocking(move || {
                let _file = session.file_lock.lock().unwrap();
                run_analysis(session.backend.as_ref(), &session.options)
            })
            .await;

            match outcome {
                Ok(Ok(result)) => {
                    let result = Arc::new(result);
                    let messages = result_messages(&result);
                    {
                        let mut state = self.state.lock().unwrap();
                        state.span = result.span;
                        state.latest = Some(Arc::clone(&result));
                    }
                    self.broadcast(&messages);
                }
                Ok(Err(e)) => {
                    log::warn!("analysis failed: {e}");
                    self.broadcast(&[Message::error(e.code(), e.to_string())]);
                }
                Err(e) => {
                    self.broadcast(&[Message::error("internal", format!("analysis task failed: {e}"))]);
                }
            }

            let again = {
                let mut state = self.state.lock().unwrap();
                if state.pending {
                    state.pending = false;
                    true
                } else {
                    state.running = false;
                    false
                }
            };
            if !again {
                break;
            }
        }
    }

    /// Rewrites the batch size literal and broadcasts `source_mutated`.
    /// Does not start a new analysis.
    pub async fn handle_set_batch_size(self: &Arc<Self>, batch_size: u32) -> Result<(), Message> {
        if batch_size == 0 {
            return Err(Message::error("mutation", "batch size must be >= 1"));
        }
        let session = Arc::clone(self);
        let outcome = tokio::task::spawn_blocking(move || {
            let _file = session.file_lock.lock().unwrap();
            let hint = session.state.lock().unwrap().span;
            let done = mutate_file(
                &session.entry_path,
                &session.options.target,
                hint.as_ref(),
                u64::from(batch_size),
            )?;
            session.state.lock().unwrap().span = Some(done.updated);
            Ok::<_, crate::mutate::MutateError>(done)
        })
        .await
        .map_err(|e| Message::error("internal", e.to_string()))?;

        match outcome {
            Ok(done) => {
                self.broadcast(&[Message::SourceMutated {
                    new_batch_size: batch_size,
                    line: done.updated.line_number,
                }]);
                Ok(())
            }
            Err(e) => Err(Message::error("mutation", e.to_string())),
        }
    }

    fn breakdown_reply(&self, path: &NodePath, sort_key: SortKey) -> Vec<Message> {
        let Some(latest) = self.latest() else {
            return vec![Message::error("no_analysis", "no analysis has completed yet")];
        };
        match breakdown_messages(&latest, path, sort_key) {
            Ok(messages) => messages.to_vec(),
            Err(e) => vec![Message::error("path", e.to_string())],
        }
    }
}

fn breakdown_messages(
    result: &AnalysisResult,
    path: &NodePath,
    sort_key: SortKey,
) -> Result<[Message; 2], BreakdownError> {
    let nodes = breakdown_nodes(&result.tree, path, sort_key)?;
    let markers = result.tree.inline_markers(path)?;
    Ok([
        Message::Breakdown {
            path: path.clone(),
            sort_key,
            untracked_run_time_ms: result.key_metrics.untracked_run_time_ms,
            untracked_memory_bytes: result.key_metrics.untracked_memory_bytes,
            nodes,
        },
        Message::InlineMarkers {
            scope: path.clone(),
            markers: markers.iter().map(WireMarker::from).collect(),
        },
    ])
}

/// `key_metrics`, `breakdown` and `inline_markers` for a finished analysis.
pub fn result_messages(result: &AnalysisResult) -> Vec<Message> {
    let [breakdown, markers] =
        breakdown_messages(result, &NodePath::root(), SortKey::RunTime).expect("root path is valid");
    vec![Message::KeyMetrics(result.key_metrics_payload()), breakdown, markers]
}

enum Incoming {
    Message(Message),
    Invalid(ProtocolError),
}

async fn drive_connection(
    session: Arc<Session>,
    mut incoming: mpsc::Receiver<Incoming>,
    out: mpsc::UnboundedSender<Message>,
) {
    let first = match incoming.recv().await {
        Some(Incoming::Message(m)) => m,
        Some(Incoming::Invalid(e)) => {
            let _ = out.send(Message::error("handshake", e.to_string()));
            return;
        }
        None => return,
    };
    if let Handshake::Rejected(reply) = handshake(&first, PROTOCOL_VERSION) {
        let _ = out.send(reply);
        return;
    }

    let _ = out.send(session.session_message());
    let client = session.register(out.clone());
    while let Some(item) = incoming.recv().await {
        let message = match item {
            Incoming::Message(m) => m,
            Incoming::Invalid(e) => {
                let fatal = matches!(e, ProtocolError::Oversized(_));
                let _ = out.send(Message::error("protocol", e.to_string()));
                if fatal {
                    break;
                }
                continue;
            }
        };
        match message {
            Message::Analyze { .. } => session.handle_analyze(),
            Message::SetBatchSize { batch_size } => {
                if let Err(reply) = session.handle_set_batch_size(batch_size).await {
                    let _ = out.send(reply);
                }
            }
            Message::GetBreakdown { path, sort_key } => {
                for reply in session.breakdown_reply(&path, sort_key) {
                    let _ = out.send(reply);
                }
            }
            other => {
                let _ = out.send(Message::error(
                    "protocol",
                    format!("unexpected `{}` message from client", other.type_name()),
                ));
            }
        }
    }
    session.unregister(client);
}

async fn handle_tcp(session: Arc<Session>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let (in_tx, in_rx) = mpsc::channel::<Incoming>(64);

    let writer = tokio::spawn(async move {
        while let Some(message) = out_rx.recv().await {
            match encode_frame(&message) {
                Ok(frame) => {
                    if wr.write_all(&frame).await.is_err() {
                        break;
                    }
                }
                Err(e) => log::error!("dropping {} message: {e}", message.type_name()),
            }
        }
        let _ = wr.shutdown().await;
    });

    let reader = tokio::spawn(async move {
        let mut decoder = FrameDecoder::new();
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            let n = match rd.read(&mut buf).await {
                Ok(0) | Err(_) => return,
                Ok(n) => n,
            };
            decoder.extend(&buf[..n]);
            loop {
                match decoder.next_message() {
                    Ok(Some(m)) => {
                        if in_tx.send(Incoming::Message(m)).await.is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        let fatal = matches!(e, ProtocolError::Oversized(_));
                        if in_tx.send(Incoming::Invalid(e)).await.is_err() || fatal {
                            return;
                        }
                    }
                }
            }
        }
    });

    drive_connection(session, in_rx, out_tx).await;
    reader.abort();
    let _ = writer.await;
}

async fn handle_ws(session: Arc<Session>, stream: TcpStream) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::debug!("websocket handshake failed: {e}");
            return;
        }
    };
    let (mut sink, mut source) = ws.split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Message>();
    let (in_tx, in_rx) = mpsc::channel::<Incoming>(64);

    let writer = tokio::spawn(async move {
        while let Some(message) = out_rx.recv().await {
            let text = String::from_utf8(encode_payload(&message)).expect("JSON is UTF-8");
            if sink.send(WsMessage::Text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let reader = tokio::spawn(async move {
        while let Some(Ok(frame)) = source.next().await {
            let decoded = match frame {
                WsMessage::Text(text) => decode_payload(text.as_bytes()),
                WsMessage::Binary(bytes) => decode_payload(&bytes),
                WsMessage::Close(_) => return,
                _ => continue,
            };
            let item = match decoded {
                Ok(m) => Incoming::Message(m),
                Err(e) => Incoming::Invalid(e),
            };
            if in_tx.send(item).await.is_err() {
                return;
            }
        }
    });

    drive_connection(session, in_rx, out_tx).await;
    reader.abort();
    let _ = writer.await;
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub host: String,
    pub tcp_port: u16,
    /// `None` disables the WebSocket listener.
    pub ws_port: Option<u16>,
}

pub struct Server {
    session: Arc<Session>,
    tcp: TcpListener,
    ws: Option<TcpListener>,
}

impl Server {
    pub async fn bind(session: Arc<Session>, config: &ServerConfig) -> io::Result<Server> {
        let tcp = TcpListener::bind((config.host.as_str(), config.tcp_port)).await?;
        let ws = match config.ws_port {
            Some(port) => Some(TcpListener::bind((config.host.as_str(), port)).await?),
            None => None,
        };
        Ok(Server { session, tcp, ws })
    }

    pub fn tcp_addr(&self) -> io::Result<SocketAddr> {
        self.tcp.local_addr()
    }

    pub fn ws_addr(&self) -> Option<io::Result<SocketAddr>> {
        self.ws.as_ref().map(|l| l.local_addr())
    }

    pub fn session(&self) -> &Arc<Session> {
        &self.session
    }

    /// Accepts connections until the task is dropped.
    pub async fn run(self) -> io::Result<()> {
        let Server { session, tcp, ws } = self;
        let ws_task = ws.map(|listener| {
            let session = Arc::clone(&session);
            tokio::spawn(async move {
                loop {
                    match listener.accept().await {
                        Ok((stream, peer)) => {
                            log::info!("websocket client {peer}");
                            tokio::spawn(handle_ws(Arc::clone(&session), stream));
                        }
                        Err(e) => log::warn!("websocket accept failed: {e}"),
                    }
                }
            })
        });
        let result = loop {
            match tcp.accept().await {
                Ok((stream, peer)) => {
                    log::info!("tcp client {peer}");
                    tokio::spawn(handle_tcp(Arc::clone(&session), stream));
                }
                Err(e) if e.kind() == io::ErrorKind::ConnectionAborted => continue,
                Err(e) => break Err(e),
            }
        };
        if let Some(task) = ws_task {
            task.abort();
        }
        result
    }
}

//! HTTP session service.
//!
//! Every session owns a worker thread that holds the [`Session`] and runs
//! commands (user messages, workflow starts) one at a time, so handlers never
//! touch a context directly. Events go to an append-only log per session and
//! are fanned out to server-sent-event subscribers, who first receive the
//! log so far and then live frames, all in seq order.
//!
//! On disk, under the data directory:
//! `sessions/{id}.jsonl` (transcript, appended per message),
//! `sessions/{id}.state.json` (status, last report, simulator snapshot),
//! `sessions/{id}/images-{n}/` (tool images of the n-th process lifetime) and
//! `images/{sha256}.{ext}` (content-addressed copies served by `/images`).

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};

use anyhow::{anyhow, Context as _, Result};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;

use eaa_core::beamline::{BeamlineSnapshot, Scenario, VirtualBeamline};
use eaa_core::context::{Context, Message};
use eaa_core::engine::{LoopConfig, Session, SessionEvent};
use eaa_core::runtime::ChannelApprovals;
use eaa_core::tools::{lock_beamline, share, ImageSink, SharedBeamline};

use crate::config::{resolve_scenario, AppConfig};
use crate::workflows::{local_registry, run_workflow_on, Workflow};

pub const MAX_IMAGE_BYTES: usize = 10 * 1024 * 1024;
const MAX_BODY_BYTES: usize = 8 * MAX_IMAGE_BYTES;
const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "gif", "webp"];

pub struct ServiceOptions {
    pub config: AppConfig,
    /// Scenario for sessions created without one.
    pub scenario: Scenario,
    pub model_spec: Option<String>,
    pub data_dir: PathBuf,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

struct Inner {
    config: AppConfig,
    scenario: Scenario,
    model_spec: Option<String>,
    data_dir: PathBuf,
    images: ImageStore,
    sessions: Mutex<BTreeMap<String, Arc<SessionHandle>>>,
}

/// Files named by the SHA-256 of their bytes.
#[derive(Clone)]
struct ImageStore {
    dir: PathBuf,
}

impl ImageStore {
    fn put_bytes(&self, bytes: &[u8], ext: &str) -> std::io::Result<(String, PathBuf)> {
        let id = hex(&Sha256::digest(bytes));
        let path = self.dir.join(format!("{id}.{ext}"));
        if !path.exists() {
            let tmp = self.dir.join(format!(".{id}.tmp"));
            std::fs::write(&tmp, bytes)?;
            std::fs::rename(&tmp, &path)?;
        }
        Ok((id, path))
    }

    fn put_file(&self, path: &Path) -> std::io::Result<String> {
        let bytes = std::fs::read(path)?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_lowercase)
            .filter(|e| IMAGE_EXTENSIONS.contains(&e.as_str()))
            .unwrap_or_else(|| "png".into());
        Ok(self.put_bytes(&bytes, &ext)?.0)
    }

    fn find(&self, id: &str) -> Option<PathBuf> {
        if id.len() != 64 || !id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        IMAGE_EXTENSIONS
            .iter()
            .map(|ext| self.dir.join(format!("{id}.{ext}")))
            .find(|p| p.is_file())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
struct Frame {
    kind: &'static str,
    data: String,
}

/// Append-only event log with live fan-out.
struct EventHub {
    log: Mutex<Vec<Arc<Frame>>>,
    tx: broadcast::Sender<Arc<Frame>>,
}

impl EventHub {
    fn new() -> Self {
        EventHub {
            log: Mutex::new(Vec::new()),
            tx: broadcast::channel(1024).0,
        }
    }

    fn publish(&self, kind: &'static str, data: Value) {
        let frame = Arc::new(Frame {
            kind,
            data: data.to_string(),
        });
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        log.push(frame.clone());
        let _ = self.tx.send(frame);
    }

    /// The log so far and a receiver for everything after it.
    fn subscribe(&self) -> (Vec<Arc<Frame>>, broadcast::Receiver<Arc<Frame>>) {
        let log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        (log.clone(), self.tx.subscribe())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionState {
    id: String,
    status: String,
    scenario: Scenario,
    #[serde(default)]
    messages: usize,
    #[serde(default)]
    last_seq: Option<u64>,
    #[serde(default)]
    last_report: Option<Value>,
    #[serde(default)]
    beamline: Option<BeamlineSnapshot>,
    /// Process lifetimes that have hosted this session.
    #[serde(default)]
    generation: u32,
}

enum Command {
    Message { text: String, images: Vec<PathBuf> },
    Workflow(Workflow),
}

struct SessionHandle {
    hub: Arc<EventHub>,
    approvals: Arc<ChannelApprovals>,
    commands: Mutex<mpsc::Sender<Command>>,
    workflow_busy: Arc<AtomicBool>,
    state: Arc<Mutex<SessionState>>,
}

fn write_state(path: &Path, state: &SessionState) {
    let tmp = path.with_extension("tmp");
    let result = serde_json::to_vec_pretty(state)
        .map_err(std::io::Error::other)
        .and_then(|bytes| std::fs::write(&tmp, bytes))
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        log::warn!("cannot persist session state {}: {e}", path.display());
    }
}

impl AppState {
    /// Prepares the data directory and resumes every persisted session.
    pub fn new(opts: ServiceOptions) -> Result<Self> {
        let sessions_dir = opts.data_dir.join("sessions");
        let images_dir = opts.data_dir.join("images");
        std::fs::create_dir_all(&sessions_dir).with_context(|| format!("cannot create {}", sessions_dir.display()))?;
        std::fs::create_dir_all(&images_dir)?;
        let state = AppState(Arc::new(Inner {
            config: opts.config,
            scenario: opts.scenario,
            model_spec: opts.model_spec,
            data_dir: opts.data_dir,
            images: ImageStore { dir: images_dir },
            sessions: Mutex::new(BTreeMap::new()),
        }));
        state.resume_all()?;
        Ok(state)
    }

    fn sessions_dir(&self) -> PathBuf {
        self.0.data_dir.join("sessions")
    }

    fn resume_all(&self) -> Result<()> {
        let mut found: Vec<PathBuf> = std::fs::read_dir(self.sessions_dir())?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(".state.json"))
            .collect();
        found.sort();
        for path in found {
            let text = std::fs::read_to_string(&path)?;
            let mut saved: SessionState = match serde_json::from_str(&text) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("skipping unreadable session state {}: {e}", path.display());
                    continue;
                }
            };
            let transcript = self.sessions_dir().join(format!("{}.jsonl", saved.id));
            let context = if transcript.exists() {
                Some(Context::load_transcript(&transcript).with_context(|| format!("cannot resume {}", saved.id))?)
            } else {
                None
            };
            if saved.status == "running" {
                saved.status = "interrupted".into();
            }
            saved.generation += 1;
            let id = saved.id.clone();
            let handle = self.start_session(saved, context)?;
            self.0.sessions.lock().unwrap().insert(id.clone(), handle);
            log::info!("resumed session {id}");
        }
        Ok(())
    }

    fn session(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.0
            .sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.0.sessions.lock().unwrap().keys().cloned().collect()
    }

    fn create_session(&self, scenario: Scenario) -> Result<String> {
        let mut sessions = self.0.sessions.lock().unwrap();
        let mut n = sessions.len() + 1;
        let id = loop {
            let candidate = format!("s{n:04}");
            if !sessions.contains_key(&candidate) && !self.sessions_dir().join(format!("{candidate}.state.json")).exists() {
                break candidate;
            }
            n += 1;
        };
        let state = SessionState {
            id: id.clone(),
            status: "idle".into(),
            scenario,
            messages: 0,
            last_seq: None,
            last_report: None,
            beamline: None,
            generation: 0,
        };
        let handle = self.start_session(state, None)?;
        sessions.insert(id.clone(), handle);
        Ok(id)
    }

    fn start_session(&self, state: SessionState, context: Option<Context>) -> Result<Arc<SessionHandle>> {
        let inner = &self.0;
        let id = state.id.clone();
        let state_path = self.sessions_dir().join(format!("{id}.state.json"));
        let transcript = self.sessions_dir().join(format!("{id}.jsonl"));
        let image_dir = self.sessions_dir().join(&id).join(format!("images-{}", state.generation));
        std::fs::create_dir_all(&image_dir)?;

        let hub = Arc::new(EventHub::new());
        if let Some(context) = &context {
            for message in &context.messages {
                hub.publish("message_appended", message_frame(message, &inner.images));
            }
        }
        let approvals = {
            let hub = hub.clone();
            Arc::new(ChannelApprovals::new(None).on_request(move |request| {
                hub.publish(
                    "approval_requested",
                    json!({
                        "type": "approval_requested",
                        "call_id": request.call_id,
                        "tool_name": request.tool_name,
                        "arguments": request.arguments,
                    }),
                );
            }))
        };

        let scenario = state.scenario.clone();
        let beamline = share(VirtualBeamline::new(scenario.clone())?);
        if let Some(snapshot) = &state.beamline {
            lock_beamline(&beamline).restore(snapshot);
        }
        let sink = ImageSink::new(&image_dir);
        let registry = local_registry(&beamline, &sink, &inner.config)?;
        let model = inner.config.model(inner.model_spec.as_deref(), &scenario)?;
        let memory = inner.config.memory()?;

        let state = Arc::new(Mutex::new(state));
        write_state(&state_path, &state.lock().unwrap());
        let events = {
            let hub = hub.clone();
            let images = inner.images.clone();
            let state = state.clone();
            let state_path = state_path.clone();
            Arc::new(move |event: &SessionEvent| {
                let (kind, data) = event_frame(event, &images);
                hub.publish(kind, data);
                let mut s = state.lock().unwrap_or_else(|e| e.into_inner());
                match event {
                    SessionEvent::MessageAppended { message } => {
                        s.messages += 1;
                        s.last_seq = Some(message.seq);
                    }
                    SessionEvent::StatusChanged { status } => s.status = status.clone(),
                    _ => return,
                }
                write_state(&state_path, &s);
            })
        };

        let mut session = Session::new(&id, model)
            .with_registry(registry)
            .with_approvals(approvals.clone())
            .with_transcript(&transcript)
            .with_events(events);
        if let Some(context) = context {
            session = session.with_context(context);
        }
        if let Some((store, rules, k)) = memory {
            session = session.with_memory(store, rules, k);
        }

        let (tx, rx) = mpsc::channel();
        let workflow_busy = Arc::new(AtomicBool::new(false));
        let worker = Worker {
            session,
            beamline,
            sink,
            scenario,
            state: state.clone(),
            state_path,
            workflow_busy: workflow_busy.clone(),
        };
        std::thread::Builder::new()
            .name(format!("session-{id}"))
            .spawn(move || worker.run(rx))?;
        Ok(Arc::new(SessionHandle {
            hub,
            approvals,
            commands: Mutex::new(tx),
            workflow_busy,
            state,
        }))
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/sessions", post(create_session).get(list_sessions))
            .route("/sessions/{id}", get(get_session))
            .route(
                "/sessions/{id}/messages",
                post(post_message).layer(DefaultBodyLimit::max(MAX_BODY_BYTES)),
            )
            .route("/sessions/{id}/workflows", post(start_workflow))
            .route("/sessions/{id}/events", get(events))
            .route("/sessions/{id}/approvals/{call_id}", post(decide_approval))
            .route("/sessions/{id}/transcript", get(transcript))
            .route("/images/{image_id}", get(image))
            .with_state(self.clone())
    }
}

struct Worker {
    session: Session,
    beamline: SharedBeamline,
    sink: ImageSink,
    scenario: Scenario,
    state: Arc<Mutex<SessionState>>,
    state_path: PathBuf,
    workflow_busy: Arc<AtomicBool>,
}

impl Worker {
    fn run(mut self, rx: mpsc::Receiver<Command>) {
        while let Ok(command) = rx.recv() {
            let mut report = None;
            match command {
                Command::Message { text, images } => match self.session.post_user(&text, &images) {
                    Ok(_) => {
                        let mut config = LoopConfig {
                            require_signal_or_tool: false,
                            ..LoopConfig::default()
                        };
                        self.session.run_loop(&mut config);
                    }
                    Err(e) => {
                        log::warn!("session {}: {e}", self.session.id());
                        self.session.set_status("error");
                    }
                },
                Command::Workflow(kind) => {
                    let (value, _) = run_workflow_on(kind, &mut self.session, &self.beamline, &self.sink, &self.scenario);
                    report = Some(value);
                }
            }
            let snapshot = lock_beamline(&self.beamline).snapshot();
            let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
            state.beamline = Some(snapshot);
            if report.is_some() {
                state.last_report = report;
            }
            write_state(&self.state_path, &state);
            drop(state);
            self.workflow_busy.store(false, Ordering::SeqCst);
        }
    }
}

/// Image parts of a message as `{path, image_id}`; files that cannot be read
/// get a null id.
fn image_refs(message: &Message, images: &ImageStore) -> Vec<Value> {
    message
        .image_paths()
        .map(|p| {
            let id = images.put_file(p).ok();
            json!({"path": p, "image_id": id})
        })
        .collect()
}

fn message_frame(message: &Message, images: &ImageStore) -> Value {
    json!({
        "type": "message_appended",
        "message": message,
        "images": image_refs(message, images),
    })
}

fn event_frame(event: &SessionEvent, images: &ImageStore) -> (&'static str, Value) {
    match event {
        SessionEvent::MessageAppended { message } => ("message_appended", message_frame(message, images)),
        SessionEvent::ToolStarted { .. } => ("tool_started", serde_json::to_value(event).unwrap_or_default()),
        SessionEvent::ToolFinished { .. } => ("tool_finished", serde_json::to_value(event).unwrap_or_default()),
        SessionEvent::StatusChanged { .. } => ("status_changed", serde_json::to_value(event).unwrap_or_default()),
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1}))).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn bad_request(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    scenario: Option<String>,
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let request: CreateSession = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSession::default()
    } else {
        serde_json::from_slice(&body).map_err(bad_request)?
    };
    let scenario = match &request.scenario {
        Some(name) => resolve_scenario(name).map_err(bad_request)?,
        None => app.0.scenario.clone(),
    };
    let id = tokio::task::spawn_blocking(move || app.create_session(scenario))
        .await
        .map_err(internal)?
        .map_err(internal)?;
    Ok((StatusCode::CREATED, Json(json!({"id": id}))).into_response())
}

async fn list_sessions(State(app): State<AppState>) -> Json<Value> {
    Json(json!({"sessions": app.session_ids()}))
}

async fn get_session(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let handle = app.session(&id)?;
    let state = handle.state.lock().unwrap().clone();
    let mut value = serde_json::to_value(&state).map_err(internal)?;
    value["workflow_running"] = json!(handle.workflow_busy.load(Ordering::SeqCst));
    value["pending_approvals"] = json!(handle.approvals.pending_ids());
    Ok(Json(value))
}

fn enqueue(handle: &SessionHandle, command: Command) -> Result<(), ApiError> {
    handle
        .commands
        .lock()
        .unwrap()
        .send(command)
        .map_err(|_| internal("the session worker has stopped"))
}

/// Multipart fields: `text` and any number of image files. Each image is
/// limited to [`MAX_IMAGE_BYTES`].
async fn post_message(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    mut multipart: Multipart,
) -> Result<Response, ApiError> {
    let handle = app.session(&id)?;
    let mut text = String::new();
    let mut images = Vec::new();
    while let Some(mut field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError(e.status(), e.body_text()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let file_name = field.file_name().map(str::to_string);
        if name == "text" && file_name.is_none() {
            text = field.text().await.map_err(|e| ApiError(e.status(), e.body_text()))?;
            continue;
        }
        let mut bytes = Vec::new();
        while let Some(chunk) = field.chunk().await.map_err(|e| ApiError(e.status(), e.body_text()))? {
            bytes.extend_from_slice(&chunk);
            if bytes.len() > MAX_IMAGE_BYTES {
                return Err(ApiError(
                    StatusCode::PAYLOAD_TOO_LARGE,
                    format!("image `{name}` exceeds {MAX_IMAGE_BYTES} bytes"),
                ));
            }
        }
        let ext = image_extension(&bytes)
            .ok_or_else(|| ApiError(StatusCode::UNSUPPORTED_MEDIA_TYPE, format!("field `{name}` is not a supported image")))?;
        let (_, path) = app.0.images.put_bytes(&bytes, ext).map_err(internal)?;
        images.push(path);
    }
    if text.trim().is_empty() && images.is_empty() {
        return Err(bad_request("a message needs text or at least one image"));
    }
    let count = images.len();
    enqueue(&handle, Command::Message { text, images })?;
    Ok((StatusCode::ACCEPTED, Json(json!({"accepted": true, "images": count}))).into_response())
}

fn image_extension(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some("png")
    } else if bytes.starts_with(&[0xff, 0xd8, 0xff]) {
        Some("jpg")
    } else if bytes.starts_with(b"GIF8") {
        Some("gif")
    } else if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        Some("webp")
    } else {
        None
    }
}

#[derive(Debug, Deserialize)]
struct StartWorkflow {
    workflow: String,
}

async fn start_workflow(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(request): Json<StartWorkflow>,
) -> Result<Response, ApiError> {
    let handle = app.session(&id)?;
    let kind = Workflow::parse(&request.workflow)
        .ok_or_else(|| bad_request(format!("unknown workflow `{}`; use focusing or feature_search", request.workflow)))?;
    if handle
        .workflow_busy
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(ApiError(StatusCode::CONFLICT, "a workflow is already running in this session".into()));
    }
    enqueue(&handle, Command::Workflow(kind))?;
    Ok((StatusCode::ACCEPTED, Json(json!({"accepted": true, "workflow": request.workflow}))).into_response())
}

async fn events(
    State(app): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let handle = app.session(&id)?;
    let (history, rx) = handle.hub.subscribe();
    // A lagging subscriber is disconnected rather than shown a gap; on
    // reconnect it receives the whole log again.
    let live = BroadcastStream::new(rx).take_while(|r| futures::future::ready(r.is_ok())).filter_map(|r| async { r.ok() });
    let frames = stream::iter(history).chain(live).map(|f| Ok(Event::default().event(f.kind).data(f.data.clone())));
    Ok(Sse::new(frames).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
struct Decision {
    approved: bool,
}

async fn decide_approval(
    State(app): State<AppState>,
    UrlPath((id, call_id)): UrlPath<(String, String)>,
    Json(decision): Json<Decision>,
) -> Result<Json<Value>, ApiError> {
    let handle = app.session(&id)?;
    if !handle.approvals.resolve(&call_id, decision.approved, "http") {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("no approval pending for call `{call_id}`")));
    }
    Ok(Json(json!({"call_id": call_id, "approved": decision.approved})))
}

async fn transcript(State(app): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    app.session(&id)?;
    let path = app.sessions_dir().join(format!("{id}.jsonl"));
    let body = match tokio::fs::read(&path).await {
        Ok(bytes) => bytes,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(internal(e)),
    };
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body).into_response())
}

async fn image(State(app): State<AppState>, UrlPath(image_id): UrlPath<String>) -> Result<Response, ApiError> {
    let path = app
        .0
        .images
        .find(&image_id)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown image `{image_id}`")))?;
    let bytes = tokio::fs::read(&path).await.map_err(internal)?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

/// Binds and serves until the process is stopped.
pub async fn serve(app: AppState, bind: &str) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(bind)
        .await
        .map_err(|e| anyhow!("cannot bind {bind}: {e}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app.router()).await?;
    Ok(())
}

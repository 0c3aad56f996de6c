//! Model Context Protocol bridge over newline-delimited JSON-RPC 2.0.
//!
//! [`McpServer`] exposes the tools of a registry; [`McpClient`] talks to an
//! external server and turns its tools into native [`Tool`]s.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::context::{media_type_for, ToolCall};
use crate::runtime::{AutoApprove, Parameters, Tool, ToolError, ToolOutput, ToolRegistry, ToolSpec};

pub const PROTOCOL_VERSION: &str = "2024-11-05";

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;
pub const INTERNAL_ERROR: i64 = -32603;

#[derive(Debug, Error)]
pub enum McpError {
    #[error("cannot start MCP server `{command}`: {reason}")]
    Spawn { command: String, reason: String },
    #[error("MCP handshake failed: {0}")]
    HandshakeFailure(String),
    #[error("MCP server disconnected")]
    Disconnected,
    #[error("MCP protocol error: {0}")]
    Protocol(String),
    #[error("remote error {code}: {message}")]
    Remote { code: i64, message: String },
    #[error("fault injection: stopped on tools/call #{0}")]
    FaultInjected(u64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn rpc_error(id: Value, code: i64, message: impl Into<String>) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "error": {"code": code, "message": message.into()}})
}

fn rpc_result(id: Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

/// Serves the tools of a registry, one request at a time.
pub struct McpServer {
    registry: ToolRegistry,
    name: String,
    calls: u64,
    /// Exit without answering when this many `tools/call` requests have been
    /// received. Used for fault-injection tests.
    pub exit_on_call: Option<u64>,
}

impl McpServer {
    pub fn new(registry: ToolRegistry) -> Self {
        McpServer {
            registry,
            name: "eaa".into(),
            calls: 0,
            exit_on_call: None,
        }
    }

    pub fn tool_names(&self) -> Vec<String> {
        self.registry.names()
    }

    /// Answers one decoded message. Notifications get no answer.
    pub fn handle(&mut self, message: &Value) -> Option<Value> {
        let id = message.get("id").cloned();
        let Some(method) = message.get("method").and_then(Value::as_str) else {
            return Some(rpc_error(id.unwrap_or(Value::Null), INVALID_REQUEST, "missing method"));
        };
        let id = id?;
        let params = message.get("params").cloned().unwrap_or(Value::Null);
        Some(match method {
            "initialize" => rpc_result(
                id,
                json!({
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {"tools": {"listChanged": false}},
                    "serverInfo": {"name": self.name, "version": env!("CARGO_PKG_VERSION")},
                }),
            ),
            "ping" => rpc_result(id, json!({})),
            "tools/list" => rpc_result(id, json!({"tools": self.list()})),
            "tools/call" => self.call(id, &params),
            other => rpc_error(id, METHOD_NOT_FOUND, format!("method not found: {other}")),
        })
    }

    fn list(&self) -> Vec<Value> {
        self.registry
            .names()
            .iter()
            .filter_map(|n| self.registry.spec(n))
            .map(|spec| {
                let schema = spec.schema();
                let mut entry = json!({
                    "name": schema.name,
                    "description": schema.description,
                    "inputSchema": schema.parameters,
                });
                if spec.high_risk {
                    entry["annotations"] = json!({"destructiveHint": true});
                }
                entry
            })
            .collect()
    }

    fn call(&mut self, id: Value, params: &Value) -> Value {
        let Some(name) = params.get("name").and_then(Value::as_str) else {
            return rpc_error(id, INVALID_PARAMS, "tools/call needs a tool name");
        };
        if !self.registry.contains(name) {
            return rpc_error(id, INVALID_PARAMS, format!("unknown tool '{name}'"));
        }
        let args = match params.get("arguments") {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(m)) => m.clone(),
            Some(_) => return rpc_error(id, INVALID_PARAMS, "arguments must be an object"),
        };
        if let Err(e) = self.registry.validate(name, &args) {
            return rpc_error(id, INVALID_PARAMS, e.to_string());
        }
        let call = ToolCall::new(format!("mcp-{id}"), name, Value::Object(args));
        let result = self.registry.execute_calls(&[call], &AutoApprove).remove(0);
        if result.is_error {
            return rpc_error(id, INTERNAL_ERROR, result.text);
        }
        let mut content = vec![json!({"type": "text", "text": result.text})];
        for path in &result.image_paths {
            match std::fs::read(path) {
                Ok(bytes) => content.push(json!({
                    "type": "image",
                    "data": BASE64.encode(bytes),
                    "mimeType": media_type_for(path),
                })),
                Err(e) => return rpc_error(id, INTERNAL_ERROR, format!("cannot read image {}: {e}", path.display())),
            }
        }
        rpc_result(id, json!({"content": content, "isError": false}))
    }

    /// Serves until the input closes, or until the `exit_on_call`-th
    /// `tools/call` arrives, which is dropped unanswered.
    pub fn serve<R: BufRead, W: Write>(&mut self, input: R, mut output: W) -> Result<(), McpError> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let reply = match serde_json::from_str::<Value>(&line) {
                Ok(message) => {
                    if message.get("method").and_then(Value::as_str) == Some("tools/call") {
                        self.calls += 1;
                        if self.exit_on_call == Some(self.calls) {
                            return Err(McpError::FaultInjected(self.calls));
                        }
                    }
                    self.handle(&message)
                }
                Err(e) => Some(rpc_error(Value::Null, PARSE_ERROR, format!("parse error: {e}"))),
            };
            if let Some(reply) = reply {
                writeln!(output, "{reply}")?;
                output.flush()?;
            }
        }
        Ok(())
    }
}

/// A tool advertised by a remote server.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteToolInfo {
    pub name: String,
    pub description: String,
    pub input_schema: Value,
    pub destructive: bool,
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
    alive: bool,
}

impl Connection {
    fn send(&mut self, message: &Value) -> Result<(), McpError> {
        let written = writeln!(self.writer, "{message}").and_then(|_| self.writer.flush());
        if written.is_err() {
            self.alive = false;
            return Err(McpError::Disconnected);
        }
        Ok(())
    }

    fn request(&mut self, method: &str, params: Value) -> Result<Value, McpError> {
        if !self.alive {
            return Err(McpError::Disconnected);
        }
        self.next_id += 1;
        let id = self.next_id;
        self.send(&json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params}))?;
        loop {
            let mut line = String::new();
            let n = self.reader.read_line(&mut line).map_err(|_| McpError::Disconnected);
            if matches!(n, Ok(0) | Err(_)) {
                self.alive = false;
                return Err(McpError::Disconnected);
            }
            if line.trim().is_empty() {
                continue;
            }
            let message: Value =
                serde_json::from_str(&line).map_err(|e| McpError::Protocol(format!("invalid JSON from server: {e}")))?;
            if message.get("id").and_then(Value::as_u64) != Some(id) {
                // notifications and stale replies
                continue;
            }
            if let Some(err) = message.get("error") {
                return Err(McpError::Remote {
                    code: err.get("code").and_then(Value::as_i64).unwrap_or(INTERNAL_ERROR),
                    message: err.get("message").and_then(Value::as_str).unwrap_or_default().to_string(),
                });
            }
            return message
                .get("result")
                .cloned()
                .ok_or_else(|| McpError::Protocol("response without result".into()));
        }
    }
}

/// Client side of one MCP connection. Calls are serialized.
#[derive(Clone)]
pub struct McpClient {
    conn: Arc<Mutex<Connection>>,
    label: String,
}

impl McpClient {
    /// Starts `command` (split like a shell would) and performs the handshake.
    pub fn spawn(command: &str) -> Result<Self, McpError> {
        let spawn_err = |reason: String| McpError::Spawn {
            command: command.to_string(),
            reason,
        };
        let argv = shlex::split(command).filter(|a| !a.is_empty()).ok_or_else(|| spawn_err("empty or malformed command".into()))?;
        let mut child = Command::new(&argv[0])
            .args(&argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| spawn_err(e.to_string()))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        Self::connect(BufReader::new(stdout), stdin, Some(child), command)
    }

    /// Handshake over an existing pair of streams.
    pub fn connect(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        child: Option<Child>,
        label: &str,
    ) -> Result<Self, McpError> {
        let client = McpClient {
            conn: Arc::new(Mutex::new(Connection {
                reader: Box::new(reader),
                writer: Box::new(writer),
                child,
                next_id: 0,
                alive: true,
            })),
            label: label.to_string(),
        };
        {
            let mut conn = client.lock();
            let result = conn
                .request(
                    "initialize",
                    json!({
                        "protocolVersion": PROTOCOL_VERSION,
                        "capabilities": {},
                        "clientInfo": {"name": "eaa", "version": env!("CARGO_PKG_VERSION")},
                    }),
                )
                .map_err(|e| McpError::HandshakeFailure(e.to_string()))?;
            let version = result.get("protocolVersion").and_then(Value::as_str);
            if version.is_none() {
                return Err(McpError::HandshakeFailure("initialize result lacks protocolVersion".into()));
            }
            if version != Some(PROTOCOL_VERSION) {
                log::info!("MCP server speaks protocol {}; continuing", version.unwrap_or_default());
            }
            conn.send(&json!({"jsonrpc": "2.0", "method": "notifications/initialized"}))
                .map_err(|e| McpError::HandshakeFailure(e.to_string()))?;
        }
        Ok(client)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn list_tools(&self) -> Result<Vec<RemoteToolInfo>, McpError> {
        let result = self.lock().request("tools/list", json!({}))?;
        let tools = result
            .get("tools")
            .and_then(Value::as_array)
            .ok_or_else(|| McpError::Protocol("tools/list result lacks tools".into()))?;
        tools
            .iter()
            .map(|t| {
                Ok(RemoteToolInfo {
                    name: t
                        .get("name")
                        .and_then(Value::as_str)
                        .ok_or_else(|| McpError::Protocol("tool without name".into()))?
                        .to_string(),
                    description: t.get("description").and_then(Value::as_str).unwrap_or_default().to_string(),
                    input_schema: t.get("inputSchema").cloned().unwrap_or_else(|| json!({"type": "object"})),
                    destructive: t
                        .pointer("/annotations/destructiveHint")
                        .and_then(Value::as_bool)
                        .unwrap_or(false),
                })
            })
            .collect()
    }

    /// Raw `tools/call`; returns the content blocks.
    pub fn call(&self, name: &str, arguments: &Map<String, Value>) -> Result<Vec<Value>, McpError> {
        let result = self
            .lock()
            .request("tools/call", json!({"name": name, "arguments": arguments}))?;
        let content = result.get("content").and_then(Value::as_array).cloned().unwrap_or_default();
        if result.get("isError").and_then(Value::as_bool) == Some(true) {
            let text = content
                .iter()
                .filter_map(|b| b.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join("\n");
            return Err(McpError::Remote {
                code: INTERNAL_ERROR,
                message: text,
            });
        }
        Ok(content)
    }

    /// Native tools for every remote tool. Images are written to `image_dir`.
    pub fn remote_tools(&self, image_dir: impl Into<PathBuf>) -> Result<Vec<McpRemoteTool>, McpError> {
        let dir = image_dir.into();
        let counter = Arc::new(AtomicU64::new(0));
        Ok(self
            .list_tools()?
            .into_iter()
            .map(|info| McpRemoteTool {
                info,
                client: self.clone(),
                image_dir: dir.clone(),
                counter: counter.clone(),
            })
            .collect())
    }

    /// Kills the server process, if this client started one.
    pub fn kill(&self) {
        let mut conn = self.lock();
        if let Some(child) = conn.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }

    pub fn is_alive(&self) -> bool {
        self.lock().alive
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A remote tool proxied 1:1 through an [`McpClient`].
pub struct McpRemoteTool {
    info: RemoteToolInfo,
    client: McpClient,
    image_dir: PathBuf,
    counter: Arc<AtomicU64>,
}

impl McpRemoteTool {
    pub fn info(&self) -> &RemoteToolInfo {
        &self.info
    }
}

impl Tool for McpRemoteTool {
    fn spec(&self) -> ToolSpec {
        ToolSpec {
            name: self.info.name.clone(),
            description: self.info.description.clone(),
            parameters: Parameters::Schema(self.info.input_schema.clone()),
            produces_images: false,
            high_risk: self.info.destructive,
        }
    }

    fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
        let content = self.client.call(&self.info.name, args).map_err(|e| match e {
            McpError::Remote { code: INVALID_PARAMS, message } => ToolError::InvalidArguments(message),
            McpError::Remote { message, .. } => ToolError::Failed(message.trim_start_matches("Error: ").to_string()),
            McpError::Disconnected => ToolError::Failed(format!(
                "remote MCP server `{}` crashed or disconnected during the call",
                self.client.label()
            )),
            other => ToolError::Failed(format!("remote MCP call failed: {other}")),
        })?;
        let mut texts = Vec::new();
        let mut images = Vec::new();
        for block in &content {
            match block.get("type").and_then(Value::as_str) {
                Some("text") => texts.push(block.get("text").and_then(Value::as_str).unwrap_or_default().to_string()),
                Some("image") => {
                    let data = block.get("data").and_then(Value::as_str).unwrap_or_default();
                    let bytes = BASE64
                        .decode(data)
                        .map_err(|e| ToolError::Failed(format!("remote image is not valid base64: {e}")))?;
                    let ext = match block.get("mimeType").and_then(Value::as_str) {
                        Some("image/jpeg") => "jpg",
                        _ => "png",
                    };
                    std::fs::create_dir_all(&self.image_dir)
                        .map_err(|e| ToolError::Failed(format!("cannot create {}: {e}", self.image_dir.display())))?;
                    let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
                    let path = self.image_dir.join(format!("{n:04}_{}.{ext}", self.info.name));
                    std::fs::write(&path, bytes)
                        .map_err(|e| ToolError::Failed(format!("cannot write {}: {e}", path.display())))?;
                    images.push(path);
                }
                _ => log::debug!("ignoring MCP content block {block}"),
            }
        }
        Ok(ToolOutput::with_images(texts.join("\n"), images))
    }
}

/// Starts `command` and registers all its tools; returns their names.
pub fn connect_command(command: &str, registry: &mut ToolRegistry, image_dir: impl Into<PathBuf>) -> Result<Vec<String>, McpError> {
    let client = McpClient::spawn(command)?;
    let mut names = Vec::new();
    for tool in client.remote_tools(image_dir)? {
        let name = tool.info.name.clone();
        if let Err(e) = registry.register(Box::new(tool)) {
            log::warn!("skipping remote tool: {e}");
            continue;
        }
        names.push(name);
    }
    Ok(names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamline::VirtualBeamline;
    use crate::tools::{beamline_tools, share, ImageSink, PythonExec};

    fn registry(dir: &std::path::Path) -> ToolRegistry {
        let beamline = share(VirtualBeamline::desk());
        let mut r = ToolRegistry::new();
        for t in beamline_tools(&beamline, &ImageSink::new(dir)) {
            r.register(t).unwrap();
        }
        r.register(Box::new(PythonExec::new())).unwrap();
        r
    }

    /// Client connected to a server running on a thread through OS pipes.
    fn pair(registry: ToolRegistry) -> (McpClient, std::thread::JoinHandle<()>) {
        let (to_server_r, to_server_w) = std::io::pipe().unwrap();
        let (to_client_r, to_client_w) = std::io::pipe().unwrap();
        let handle = std::thread::spawn(move || {
            McpServer::new(registry).serve(BufReader::new(to_server_r), to_client_w).unwrap();
        });
        let client = McpClient::connect(BufReader::new(to_client_r), to_server_w, None, "thread").unwrap();
        (client, handle)
    }

    #[test]
    fn error_codes() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = McpServer::new(registry(dir.path()));
        let r = s.handle(&json!({"jsonrpc": "2.0", "id": 1, "method": "resources/list"})).unwrap();
        assert_eq!(r["error"]["code"], METHOD_NOT_FOUND);
        let r = s
            .handle(&json!({"jsonrpc": "2.0", "id": 2, "method": "tools/call", "params": {"name": "set_zone_plate_z", "arguments": {}}}))
            .unwrap();
        assert_eq!(r["error"]["code"], INVALID_PARAMS);
        let r = s
            .handle(&json!({"jsonrpc": "2.0", "id": 3, "method": "tools/call", "params": {"name": "set_zone_plate_z", "arguments": {"z": 5.0}}}))
            .unwrap();
        assert_eq!(r["error"]["code"], INTERNAL_ERROR);
        assert!(r["error"]["message"].as_str().unwrap().contains("outside the allowed range"));
        assert!(s.handle(&json!({"jsonrpc": "2.0", "method": "notifications/initialized"})).is_none());
    }

    #[test]
    fn list_matches_in_process_schemas() {
        let dir = tempfile::tempdir().unwrap();
        let local = registry(dir.path());
        let expected: Vec<String> = local.schemas().iter().map(|s| s.parameters.to_string()).collect();
        let (client, _h) = pair(registry(dir.path()));
        let tools = client.remote_tools(dir.path().join("remote")).unwrap();
        let got: Vec<String> = tools.iter().map(|t| t.spec().schema().parameters.to_string()).collect();
        assert_eq!(got, expected);
        let python = tools.iter().find(|t| t.info().name == "python_exec").unwrap();
        assert!(python.spec().high_risk);
    }

    #[test]
    fn scan_line_call_returns_text_and_image() {
        let dir = tempfile::tempdir().unwrap();
        let (client, _h) = pair(registry(dir.path()));
        let args = json!({"x_start": 21.0, "y_start": 40.0, "x_end": 39.0, "y_end": 40.0, "n_points": 91});
        let blocks = client.call("scan_line_1d", args.as_object().unwrap()).unwrap();
        assert_eq!(blocks.len(), 2);
        assert!(blocks[0]["text"].as_str().unwrap().contains("FWHM="));
        assert_eq!(blocks[1]["type"], "image");
        assert_eq!(blocks[1]["mimeType"], "image/png");
    }

    #[test]
    fn empty_server_registers_nothing() {
        let (client, _h) = pair(ToolRegistry::new());
        assert!(client.remote_tools("unused").unwrap().is_empty());
    }

    #[test]
    fn spawn_failures_are_reported() {
        assert!(matches!(McpClient::spawn(""), Err(McpError::Spawn { .. })));
        assert!(matches!(McpClient::spawn("/nonexistent/eaa-mcp"), Err(McpError::Spawn { .. })));
        // a process that exits immediately never completes the handshake
        assert!(matches!(McpClient::spawn("true"), Err(McpError::HandshakeFailure(_))));
    }
}

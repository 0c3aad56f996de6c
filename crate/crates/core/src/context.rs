//! Multimodal conversation record.
//!
//! A [`Context`] is the ordered list of messages exchanged between the user,
//! the workflow, the model and the tools of one session. Images never live
//! inside the context: image parts and tool results carry file paths, and the
//! bytes are read only when the context is rendered for the wire.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("tool result for call `{0}` does not match any pending tool call")]
    DanglingToolResult(String),
    #[error("role/field mismatch: {0}")]
    RoleFieldMismatch(String),
    #[error("tool call id `{0}` is already used in this context")]
    DuplicateToolCallId(String),
    #[error("arguments of tool call `{0}` are not a JSON object")]
    MalformedArguments(String),
    #[error("image file {0} is missing or unreadable")]
    MissingImageFile(PathBuf),
    #[error("corrupt transcript at line {line}: {reason}")]
    CorruptTranscript { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Author of a message.
///
/// `Auto` marks user-proxy messages generated by workflow logic; it is kept in
/// transcripts for auditing and sent to the model as `user`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
    Tool,
    System,
    Auto,
}

impl Role {
    pub fn wire_name(self) -> &'static str {
        match self {
            Role::User | Role::Auto => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
            Role::System => "system",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
            Role::System => "system",
            Role::Auto => "auto",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageOrigin {
    Tool,
    UserPaste,
    Workflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text {
        text: String,
    },
    ImageRef {
        path: PathBuf,
        media_type: String,
        origin: ImageOrigin,
    },
}

impl ContentPart {
    pub fn text(text: impl Into<String>) -> Self {
        ContentPart::Text { text: text.into() }
    }

    /// Image part with the media type inferred from the file extension.
    pub fn image(path: impl Into<PathBuf>, origin: ImageOrigin) -> Self {
        let path = path.into();
        let media_type = media_type_for(&path).to_string();
        ContentPart::ImageRef {
            path,
            media_type,
            origin,
        }
    }
}

pub fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub id: String,
    pub tool_name: String,
    /// JSON object text as produced by the model.
    pub arguments_json: String,
}

impl ToolCall {
    pub fn new(id: impl Into<String>, tool_name: impl Into<String>, arguments: serde_json::Value) -> Self {
        ToolCall {
            id: id.into(),
            tool_name: tool_name.into(),
            arguments_json: arguments.to_string(),
        }
    }

    pub fn arguments(&self) -> Option<serde_json::Map<String, serde_json::Value>> {
        match serde_json::from_str(&self.arguments_json) {
            Ok(serde_json::Value::Object(map)) => Some(map),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub call_id: String,
    pub text: String,
    #[serde(default)]
    pub image_paths: Vec<PathBuf>,
    #[serde(default)]
    pub is_error: bool,
    #[serde(default)]
    pub denied: bool,
}

impl ToolResult {
    pub fn ok(call_id: impl Into<String>, text: impl Into<String>, image_paths: Vec<PathBuf>) -> Self {
        ToolResult {
            call_id: call_id.into(),
            text: text.into(),
            image_paths,
            is_error: false,
            denied: false,
        }
    }

    pub fn error(call_id: impl Into<String>, text: impl Into<String>) -> Self {
        ToolResult {
            call_id: call_id.into(),
            text: text.into(),
            image_paths: Vec::new(),
            is_error: true,
            denied: false,
        }
    }

    pub fn denied(call_id: impl Into<String>, text: impl Into<String>) -> Self {
        ToolResult {
            denied: true,
            ..ToolResult::error(call_id, text)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub role: Role,
    pub parts: Vec<ContentPart>,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default)]
    pub tool_result: Option<ToolResult>,
    #[serde(with = "rfc3339_millis")]
    pub timestamp: DateTime<Utc>,
}

impl Message {
    fn bare(role: Role, parts: Vec<ContentPart>) -> Self {
        Message {
            seq: 0,
            role,
            parts,
            tool_calls: Vec::new(),
            tool_result: None,
            timestamp: DateTime::<Utc>::UNIX_EPOCH,
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::bare(Role::User, vec![ContentPart::text(text)])
    }

    pub fn auto(text: impl Into<String>) -> Self {
        Self::bare(Role::Auto, vec![ContentPart::text(text)])
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::bare(Role::System, vec![ContentPart::text(text)])
    }

    pub fn with_parts(role: Role, parts: Vec<ContentPart>) -> Self {
        Self::bare(role, parts)
    }

    pub fn assistant(text: impl Into<String>, tool_calls: Vec<ToolCall>) -> Self {
        let text = text.into();
        let parts = if text.is_empty() {
            Vec::new()
        } else {
            vec![ContentPart::text(text)]
        };
        Message {
            tool_calls,
            ..Self::bare(Role::Assistant, parts)
        }
    }

    pub fn tool(result: ToolResult) -> Self {
        Message {
            parts: vec![ContentPart::text(result.text.clone())],
            tool_result: Some(result),
            ..Self::bare(Role::Tool, Vec::new())
        }
    }

    /// Concatenated text parts.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for part in &self.parts {
            if let ContentPart::Text { text } = part {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(text);
            }
        }
        out
    }

    pub fn image_paths(&self) -> impl Iterator<Item = &Path> {
        self.parts.iter().filter_map(|p| match p {
            ContentPart::ImageRef { path, .. } => Some(path.as_path()),
            ContentPart::Text { .. } => None,
        })
    }

    fn check_fields(&self) -> Result<(), ContextError> {
        if !self.tool_calls.is_empty() && self.role != Role::Assistant {
            return Err(ContextError::RoleFieldMismatch(format!(
                "{} message carries tool calls",
                self.role
            )));
        }
        match (self.role, &self.tool_result) {
            (Role::Tool, None) => Err(ContextError::RoleFieldMismatch(
                "tool message without tool result".into(),
            )),
            (role, Some(_)) if role != Role::Tool => Err(ContextError::RoleFieldMismatch(format!(
                "{role} message carries a tool result"
            ))),
            _ => Ok(()),
        }
    }
}

/// Caption of the auxiliary user message that carries a tool's images.
pub fn image_caption(call_id: &str) -> String {
    format!("Image(s) produced by tool call {call_id}")
}

/// Source of message timestamps.
#[derive(Debug, Clone, Default)]
pub enum Clock {
    #[default]
    System,
    /// Deterministic clock: `epoch + seq` milliseconds. Used for replayable runs.
    Logical { epoch: DateTime<Utc> },
}

impl Clock {
    pub fn logical() -> Self {
        Clock::Logical {
            epoch: Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap(),
        }
    }

    fn stamp(&self, seq: u64) -> DateTime<Utc> {
        match self {
            Clock::System => truncate_millis(Utc::now()),
            Clock::Logical { epoch } => *epoch + Duration::milliseconds(seq as i64),
        }
    }
}

fn truncate_millis(t: DateTime<Utc>) -> DateTime<Utc> {
    DateTime::from_timestamp_millis(t.timestamp_millis()).unwrap_or(t)
}

/// Allocator of message sequence numbers.
///
/// Nested task managers share one source with their parent so that sequence
/// numbers never collide across a task tree.
#[derive(Debug, Clone, Default)]
pub struct SeqSource(Arc<AtomicU64>);

impl SeqSource {
    pub fn starting_at(next: u64) -> Self {
        SeqSource(Arc::new(AtomicU64::new(next)))
    }

    fn advance_past(&self, seq: u64) {
        self.0.fetch_max(seq + 1, Ordering::SeqCst);
    }

    fn next(&self) -> u64 {
        self.0.fetch_add(1, Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Context {
    pub session_id: String,
    pub messages: Vec<Message>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(skip)]
    seq_source: SeqSource,
    #[serde(skip)]
    clock: Clock,
}

impl PartialEq for Context {
    fn eq(&self, other: &Self) -> bool {
        self.session_id == other.session_id
            && self.messages == other.messages
            && self.metadata == other.metadata
    }
}

impl Context {
    pub fn new(session_id: impl Into<String>) -> Self {
        Context {
            session_id: session_id.into(),
            ..Default::default()
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    /// A fresh context sharing this context's sequence source and clock.
    pub fn child(&self, session_id: impl Into<String>) -> Self {
        Context {
            session_id: session_id.into(),
            messages: Vec::new(),
            metadata: BTreeMap::new(),
            seq_source: self.seq_source.clone(),
            clock: self.clock.clone(),
        }
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    /// Appends a message, assigning its sequence number and timestamp.
    pub fn append(&mut self, mut message: Message) -> Result<&Message, ContextError> {
        message.check_fields()?;
        let mut seen = HashSet::new();
        for call in &message.tool_calls {
            if call.arguments().is_none() {
                return Err(ContextError::MalformedArguments(call.id.clone()));
            }
            if !seen.insert(call.id.as_str()) || self.has_tool_call(&call.id) {
                return Err(ContextError::DuplicateToolCallId(call.id.clone()));
            }
        }
        if let Some(result) = &message.tool_result {
            if !self.pending_call_ids().contains(&result.call_id) {
                return Err(ContextError::DanglingToolResult(result.call_id.clone()));
            }
        }
        if let Some(last) = self.messages.last() {
            self.seq_source.advance_past(last.seq);
        }
        message.seq = self.seq_source.next();
        message.timestamp = self.clock.stamp(message.seq);
        self.messages.push(message);
        Ok(self.messages.last().unwrap())
    }

    fn has_tool_call(&self, id: &str) -> bool {
        self.messages
            .iter()
            .flat_map(|m| m.tool_calls.iter())
            .any(|c| c.id == id)
    }

    /// Call ids of the nearest preceding assistant message that still has
    /// unanswered tool calls.
    pub fn pending_call_ids(&self) -> HashSet<String> {
        let mut resolved: HashSet<&str> = HashSet::new();
        for message in self.messages.iter().rev() {
            if let Some(result) = &message.tool_result {
                resolved.insert(result.call_id.as_str());
            }
            if message.role == Role::Assistant && !message.tool_calls.is_empty() {
                let pending: HashSet<String> = message
                    .tool_calls
                    .iter()
                    .filter(|c| !resolved.contains(c.id.as_str()))
                    .map(|c| c.id.clone())
                    .collect();
                if !pending.is_empty() {
                    return pending;
                }
            }
        }
        HashSet::new()
    }

    pub fn persist_transcript(&self, path: &Path) -> Result<(), ContextError> {
        let mut out = BufWriter::new(File::create(path)?);
        for message in &self.messages {
            serde_json::to_writer(&mut out, message).map_err(std::io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Appends one message line to a transcript file.
    pub fn append_to_transcript(message: &Message, path: &Path) -> Result<(), ContextError> {
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)?;
        let mut line = serde_json::to_vec(message).map_err(std::io::Error::other)?;
        line.push(b'\n');
        file.write_all(&line)?;
        Ok(())
    }

    /// Loads a JSONL transcript. The session id is the file stem.
    pub fn load_transcript(path: &Path) -> Result<Context, ContextError> {
        let reader = BufReader::new(File::open(path)?);
        let session_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut messages: Vec<Message> = Vec::new();
        for (index, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let message: Message =
                serde_json::from_str(&line).map_err(|e| ContextError::CorruptTranscript {
                    line: index + 1,
                    reason: e.to_string(),
                })?;
            if let Some(prev) = messages.last() {
                if message.seq <= prev.seq {
                    return Err(ContextError::CorruptTranscript {
                        line: index + 1,
                        reason: "sequence numbers are not increasing".into(),
                    });
                }
            }
            messages.push(message);
        }
        let next = messages.last().map(|m| m.seq + 1).unwrap_or(0);
        Ok(Context {
            session_id,
            messages,
            metadata: BTreeMap::new(),
            seq_source: SeqSource::starting_at(next),
            clock: Clock::System,
        })
    }
}

mod rfc3339_millis {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_rfc3339_opts(SecondsFormat::Millis, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let s = String::deserialize(d)?;
        DateTime::parse_from_rfc3339(&s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(serde::de::Error::custom)
    }
}

//! Task manager: the chat loop, its hooks and guardrails, sub-agents and the
//! built-in workflows.

mod focusing;
mod hooks;
mod policy;
mod search;
mod sequence;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{Clock, ContentPart, Context, ContextError, ImageOrigin, Message, Role, ToolCall, ToolResult};
use crate::memory::{memory_message, MemoryStore, NotabilityRules};
use crate::model::{ChatModel, ModelError, ModelResponse};
use crate::runtime::{postprocess_result, ApprovalSource, AutoApprove, DispatchEvent, ToolRegistry};

pub use focusing::{focusing_prompt, run_focusing, FocusingParams, FocusingReport, FocusPoint, FOCUSING_SEQUENCE};
pub use hooks::{
    ask_yes_no, feature_tracking_registry, offset_message, parse_offset, parse_yes_no, registration_hook,
    spawn_feature_tracking, spawn_subtask, SubtaskOutcome, SubtaskSpec, OVERLAP_QUESTION,
};
pub use policy::{FeatureSearchPolicy, FocusingPolicy};
pub use search::{feature_search_prompt, run_feature_search, FeatureSearchParams, FeatureSearchReport};
pub use sequence::SequenceGuard;

/// Auto-reply sent when a response has neither tool calls nor a termination
/// token while the loop requires one of them.
pub const AUTO_REPLY: &str = "This is an automatic reply. An agent that is still working either sends a termination \
signal or makes tool calls. Continue the task with tool calls; reply TERMINATE when the task is done, \
or NEED HUMAN if you need the user's help.";

pub const DEFAULT_TERMINATION_TOKENS: [&str; 2] = ["TERMINATE", "NEED HUMAN"];

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("hook failed: {0}")]
    Hook(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    Terminated,
    HumanHandoff,
    RoundCap,
    Error,
}

impl LoopStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopStatus::Terminated => "terminated",
            LoopStatus::HumanHandoff => "human_handoff",
            LoopStatus::RoundCap => "round_cap",
            LoopStatus::Error => "error",
        }
    }
}

impl std::fmt::Display for LoopStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    AfterTool(String),
    BeforeModelCall,
}

pub type HookAction = Box<dyn FnMut(&mut Session, Option<&ToolResult>) -> Result<Vec<Message>, String> + Send>;

/// Procedure run by the loop when its trigger fires. The returned messages
/// are appended to the context; the action may also talk to the model or
/// spawn sub-tasks through the session it receives.
pub struct Hook {
    pub name: String,
    pub trigger: Trigger,
    pub action: HookAction,
}

impl Hook {
    pub fn new(
        name: &str,
        trigger: Trigger,
        action: impl FnMut(&mut Session, Option<&ToolResult>) -> Result<Vec<Message>, String> + Send + 'static,
    ) -> Self {
        Hook {
            name: name.into(),
            trigger,
            action: Box::new(action),
        }
    }
}

pub struct LoopConfig {
    pub system_prompt: Option<String>,
    pub initial_prompt: Option<String>,
    pub require_signal_or_tool: bool,
    pub termination_tokens: Vec<String>,
    pub max_rounds: usize,
    pub max_consecutive_autoreplies: usize,
    pub expected_sequence: Option<SequenceGuard>,
    pub hooks: Vec<Hook>,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            system_prompt: None,
            initial_prompt: None,
            require_signal_or_tool: true,
            termination_tokens: DEFAULT_TERMINATION_TOKENS.iter().map(|t| t.to_string()).collect(),
            max_rounds: 64,
            max_consecutive_autoreplies: 3,
            expected_sequence: None,
            hooks: Vec::new(),
        }
    }
}

impl LoopConfig {
    pub fn with_prompt(prompt: impl Into<String>) -> Self {
        LoopConfig {
            initial_prompt: Some(prompt.into()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoopOutcome {
    pub status: LoopStatus,
    pub rounds: usize,
    pub transcript: Context,
    pub error: Option<String>,
}

/// Something observable happened in a session.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SessionEvent {
    MessageAppended { message: Message },
    ToolStarted { call_id: String, tool_name: String, arguments: String },
    ToolFinished { result: ToolResult },
    StatusChanged { status: String },
}

pub type EventSink = Arc<dyn Fn(&SessionEvent) + Send + Sync>;

struct SessionMemory {
    store: MemoryStore,
    rules: NotabilityRules,
    k: usize,
}

/// One agent with its context, tools and model: a task manager.
pub struct Session {
    pub context: Context,
    pub registry: ToolRegistry,
    model: Arc<dyn ChatModel>,
    approvals: Arc<dyn ApprovalSource>,
    memory: Option<SessionMemory>,
    events: Option<EventSink>,
    transcript_path: Option<PathBuf>,
}

impl Session {
    pub fn new(session_id: &str, model: Arc<dyn ChatModel>) -> Self {
        Session {
            context: Context::new(session_id),
            registry: ToolRegistry::new(),
            model,
            approvals: Arc::new(AutoApprove),
            memory: None,
            events: None,
            transcript_path: None,
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.context = self.context.with_clock(clock);
        self
    }

    pub fn with_context(mut self, context: Context) -> Self {
        self.context = context;
        self
    }

    pub fn with_registry(mut self, registry: ToolRegistry) -> Self {
        self.registry = registry;
        self
    }

    pub fn with_approvals(mut self, approvals: Arc<dyn ApprovalSource>) -> Self {
        self.approvals = approvals;
        self
    }

    pub fn with_memory(mut self, store: MemoryStore, rules: NotabilityRules, k: usize) -> Self {
        self.memory = Some(SessionMemory { store, rules, k: k.max(1) });
        self
    }

    pub fn with_events(mut self, sink: EventSink) -> Self {
        self.events = Some(sink);
        self
    }

    /// Every appended message is also written to this JSONL file.
    pub fn with_transcript(mut self, path: impl Into<PathBuf>) -> Self {
        self.transcript_path = Some(path.into());
        self
    }

    pub fn id(&self) -> &str {
        &self.context.session_id
    }

    pub fn model(&self) -> &Arc<dyn ChatModel> {
        &self.model
    }

    pub fn approvals(&self) -> &Arc<dyn ApprovalSource> {
        &self.approvals
    }

    pub fn memory_store(&self) -> Option<&MemoryStore> {
        self.memory.as_ref().map(|m| &m.store)
    }

    fn emit(&self, event: SessionEvent) {
        if let Some(sink) = &self.events {
            sink(&event);
        }
    }

    pub fn set_status(&self, status: &str) {
        self.emit(SessionEvent::StatusChanged { status: status.into() });
    }

    /// Appends a message, persists it and notifies subscribers. Returns its seq.
    pub fn push(&mut self, message: Message) -> Result<u64, EngineError> {
        let appended = self.context.append(message)?.clone();
        if let Some(path) = &self.transcript_path {
            Context::append_to_transcript(&appended, path)?;
        }
        let seq = appended.seq;
        self.emit(SessionEvent::MessageAppended { message: appended });
        Ok(seq)
    }

    /// Adds a user turn. With memory enabled, related records are injected
    /// first and notable messages are stored.
    pub fn post_user(&mut self, text: &str, images: &[PathBuf]) -> Result<u64, EngineError> {
        let mut parts = Vec::new();
        if !text.is_empty() {
            parts.push(ContentPart::text(text));
        }
        for path in images {
            if !path.is_file() {
                return Err(ContextError::MissingImageFile(path.clone()).into());
            }
            parts.push(ContentPart::image(path.clone(), ImageOrigin::UserPaste));
        }
        let message = Message::with_parts(Role::User, parts);
        let injected = match &self.memory {
            Some(m) if !text.trim().is_empty() => memory_message(&m.store.retrieve(text, m.k)),
            _ => None,
        };
        if let Some(note) = injected {
            self.push(note)?;
        }
        let notable = self.memory.as_ref().is_some_and(|m| m.rules.detect_notable(&message));
        let seq = self.push(message)?;
        if notable {
            let session = self.context.session_id.clone();
            let at = self.context.last().map(|m| m.timestamp).unwrap_or_else(Utc::now);
            if let Some(m) = &mut self.memory {
                if let Err(e) = m.store.remember(text, vec!["user".into()], &session, at) {
                    log::warn!("could not store memory: {e}");
                }
            }
        }
        Ok(seq)
    }

    /// One completion over the current context with the registry's schemas.
    pub fn complete(&self) -> Result<ModelResponse, ModelError> {
        self.model.complete(&self.context, &self.registry.schemas())
    }

    /// Executes calls in order, appending each tool message (and image
    /// message) as soon as the call finishes.
    pub fn execute(&mut self, calls: &[ToolCall]) -> Result<Vec<ToolResult>, EngineError> {
        let mut results = Vec::with_capacity(calls.len());
        for call in calls {
            let approvals = self.approvals.clone();
            let events = self.events.clone();
            let mut batch = self.registry.execute_calls_observed(std::slice::from_ref(call), approvals.as_ref(), &mut |ev| {
                if let Some(sink) = &events {
                    match ev {
                        DispatchEvent::Started(c) => sink(&SessionEvent::ToolStarted {
                            call_id: c.id.clone(),
                            tool_name: c.tool_name.clone(),
                            arguments: c.arguments_json.clone(),
                        }),
                        DispatchEvent::Finished(r) => sink(&SessionEvent::ToolFinished { result: r.clone() }),
                    }
                }
            });
            let result = batch.remove(0);
            let messages = match postprocess_result(&result) {
                Ok(m) => m,
                Err(e) => {
                    log::warn!("tool {} returned an unusable image: {e}", call.tool_name);
                    let mut broken = result.clone();
                    broken.image_paths.clear();
                    broken.is_error = true;
                    broken.text = format!("{}\nError: {e}", broken.text);
                    vec![Message::tool(broken)]
                }
            };
            for m in messages {
                self.push(m)?;
            }
            results.push(result);
        }
        Ok(results)
    }

    /// Runs the chat loop until a termination token, a human hand-off, the
    /// round cap or an error.
    ///
    /// A round is one completion. Tool calls in a response are executed even
    /// when the response also carries a termination token; the loop then
    /// continues so that the model sees the results.
    pub fn run_loop(&mut self, config: &mut LoopConfig) -> LoopOutcome {
        self.set_status("running");
        let mut rounds = 0;
        let (status, error) = match self.drive(config, &mut rounds) {
            Ok(status) => (status, None),
            Err(e) => (LoopStatus::Error, Some(e.to_string())),
        };
        self.set_status(status.as_str());
        LoopOutcome {
            status,
            rounds,
            transcript: self.context.clone(),
            error,
        }
    }

    fn drive(&mut self, config: &mut LoopConfig, rounds: &mut usize) -> Result<LoopStatus, EngineError> {
        if let Some(system) = &config.system_prompt {
            if self.context.is_empty() {
                self.push(Message::system(system.clone()))?;
            }
        }
        if let Some(prompt) = &config.initial_prompt {
            self.post_user(prompt, &[])?;
        }
        let mut autoreplies = 0;
        while *rounds < config.max_rounds.max(1) {
            self.fire(config, &Trigger::BeforeModelCall, None)?;
            *rounds += 1;
            let response = match self.complete() {
                Ok(r) => r,
                Err(ModelError::MalformedToolArguments { call_id, tool_name, raw }) => {
                    self.push(Message::auto(format!(
                        "The arguments of your tool call `{call_id}` ({tool_name}) are not a valid JSON object: {raw}\n\
                         Please repeat the call with its arguments as a JSON object."
                    )))?;
                    autoreplies += 1;
                    if autoreplies >= config.max_consecutive_autoreplies {
                        return Ok(LoopStatus::HumanHandoff);
                    }
                    continue;
                }
                Err(e) => return Err(e.into()),
            };
            let calls = response.tool_calls.clone();
            self.push(Message::assistant(response.text.clone(), calls.clone()))?;

            if !calls.is_empty() {
                autoreplies = 0;
                let results = self.execute(&calls)?;
                if let Some(guard) = &mut config.expected_sequence {
                    for call in &calls {
                        if let Some(warning) = guard.check(&call.tool_name) {
                            self.push(Message::auto(warning))?;
                        }
                    }
                }
                for (call, result) in calls.iter().zip(&results) {
                    self.fire(config, &Trigger::AfterTool(call.tool_name.clone()), Some(result))?;
                }
                continue;
            }

            if let Some(token) = find_termination(&response.text, &config.termination_tokens) {
                return Ok(if token == "NEED HUMAN" {
                    LoopStatus::HumanHandoff
                } else {
                    LoopStatus::Terminated
                });
            }
            if !config.require_signal_or_tool {
                return Ok(LoopStatus::HumanHandoff);
            }
            self.push(Message::auto(AUTO_REPLY))?;
            autoreplies += 1;
            if autoreplies >= config.max_consecutive_autoreplies {
                return Ok(LoopStatus::HumanHandoff);
            }
        }
        Ok(LoopStatus::RoundCap)
    }

    fn fire(&mut self, config: &mut LoopConfig, trigger: &Trigger, result: Option<&ToolResult>) -> Result<(), EngineError> {
        for i in 0..config.hooks.len() {
            if &config.hooks[i].trigger != trigger {
                continue;
            }
            let produced = (config.hooks[i].action)(self, result);
            match produced {
                Ok(messages) => {
                    for m in messages {
                        self.push(m)?;
                    }
                }
                Err(e) => log::warn!("hook {} failed and was skipped: {e}", config.hooks[i].name),
            }
        }
        Ok(())
    }

    /// Writes the whole transcript to `path`.
    pub fn save_transcript(&self, path: &Path) -> Result<(), EngineError> {
        Ok(self.context.persist_transcript(path)?)
    }
}

/// The earliest termination token present as a whole word, if any.
pub fn find_termination<'a>(text: &str, tokens: &'a [String]) -> Option<&'a str> {
    tokens
        .iter()
        .filter_map(|t| {
            let re = Regex::new(&format!(r"(?:^|\W){}(?:\W|$)", regex::escape(t))).ok()?;
            re.find(text).map(|m| (m.start(), t.as_str()))
        })
        .min_by_key(|(pos, _)| *pos)
        .map(|(_, t)| t)
}

/// Text of the last assistant message in a context.
pub fn last_assistant_text(context: &Context) -> Option<String> {
    context
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::Assistant)
        .map(Message::text)
}

/// Tool name of the call a tool result answers.
pub fn tool_name_of(context: &Context, call_id: &str) -> Option<String> {
    context
        .messages
        .iter()
        .flat_map(|m| m.tool_calls.iter())
        .find(|c| c.id == call_id)
        .map(|c| c.tool_name.clone())
}

/// Successful results of the named tool, in order.
pub fn results_of<'a>(context: &'a Context, tool: &str) -> Vec<&'a ToolResult> {
    context
        .messages
        .iter()
        .filter_map(|m| m.tool_result.as_ref())
        .filter(|r| !r.is_error && tool_name_of(context, &r.call_id).as_deref() == Some(tool))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ScriptedModel;
    use crate::runtime::{ParamDecl, Tool, ToolError, ToolOutput, ToolSpec};
    use serde_json::{json, Map, Value};

    struct Echo;

    impl Tool for Echo {
        fn spec(&self) -> ToolSpec {
            ToolSpec::new("echo", "echo", vec![ParamDecl::string("text", "text")])
        }

        fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
            Ok(ToolOutput::text(args["text"].as_str().unwrap_or_default()))
        }
    }

    fn session(script: Vec<ModelResponse>) -> Session {
        let mut s = Session::new("t", Arc::new(ScriptedModel::new(script))).with_clock(Clock::logical());
        s.registry.register(Box::new(Echo)).unwrap();
        s
    }

    fn echo(id: &str) -> ToolCall {
        ToolCall::new(id, "echo", json!({"text": "hi"}))
    }

    #[test]
    fn termination_tokens_are_whole_words() {
        let tokens: Vec<String> = DEFAULT_TERMINATION_TOKENS.iter().map(|s| s.to_string()).collect();
        assert_eq!(find_termination("All done. TERMINATE", &tokens), Some("TERMINATE"));
        assert_eq!(find_termination("I NEED HUMAN help", &tokens), Some("NEED HUMAN"));
        assert_eq!(find_termination("terminate", &tokens), None);
        assert_eq!(find_termination("TERMINATED", &tokens), None);
        assert_eq!(find_termination("NEED HUMANS", &tokens), None);
        assert_eq!(find_termination("NEED HUMAN, then TERMINATE", &tokens), Some("NEED HUMAN"));
    }

    #[test]
    fn tool_calls_then_terminate() {
        let mut s = session(vec![
            ModelResponse::with_calls("", vec![echo("a")]),
            ModelResponse::with_calls("", vec![echo("b")]),
            ModelResponse::text("TERMINATE"),
        ]);
        let out = s.run_loop(&mut LoopConfig::with_prompt("go"));
        assert_eq!(out.status, LoopStatus::Terminated);
        assert_eq!(out.rounds, 3);
        assert_eq!(out.transcript.len(), 6);
    }

    #[test]
    fn plain_text_gets_the_auto_reply() {
        let mut s = session(vec![ModelResponse::text("done"), ModelResponse::text("TERMINATE")]);
        let out = s.run_loop(&mut LoopConfig::with_prompt("go"));
        assert_eq!(out.status, LoopStatus::Terminated);
        let auto = &out.transcript.messages[2];
        assert_eq!(auto.role, Role::Auto);
        assert_eq!(auto.text(), AUTO_REPLY);
    }

    #[test]
    fn autoreply_limit_hands_off() {
        let mut s = session(vec![ModelResponse::text("a"), ModelResponse::text("b"), ModelResponse::text("c")]);
        let out = s.run_loop(&mut LoopConfig::with_prompt("go"));
        assert_eq!(out.status, LoopStatus::HumanHandoff);
        assert_eq!(out.rounds, 3);
        assert_eq!(out.transcript.len(), 7);
    }

    #[test]
    fn chat_mode_hands_back_after_text() {
        let mut s = session(vec![ModelResponse::text("hello there")]);
        let mut cfg = LoopConfig::with_prompt("hi");
        cfg.require_signal_or_tool = false;
        let out = s.run_loop(&mut cfg);
        assert_eq!(out.status, LoopStatus::HumanHandoff);
        assert_eq!(out.transcript.len(), 2);
    }

    #[test]
    fn round_cap_and_model_error() {
        let mut s = session(vec![ModelResponse::with_calls("", vec![echo("a")]), ModelResponse::with_calls("", vec![echo("b")])]);
        let mut cfg = LoopConfig::with_prompt("go");
        cfg.max_rounds = 2;
        assert_eq!(s.run_loop(&mut cfg).status, LoopStatus::RoundCap);

        let mut s = session(vec![]);
        let out = s.run_loop(&mut LoopConfig::with_prompt("go"));
        assert_eq!(out.status, LoopStatus::Error);
        assert!(out.error.unwrap().contains("no responses left"));
        assert_eq!(out.transcript.len(), 1);
    }

    #[test]
    fn unknown_tool_does_not_break_the_loop() {
        let mut s = session(vec![
            ModelResponse::with_calls("", vec![ToolCall::new("x", "frobnicate", json!({}))]),
            ModelResponse::text("TERMINATE"),
        ]);
        let out = s.run_loop(&mut LoopConfig::with_prompt("go"));
        assert_eq!(out.status, LoopStatus::Terminated);
        let result = out.transcript.messages[2].tool_result.as_ref().unwrap();
        assert!(result.is_error && result.text.contains("unknown tool"));
    }

    #[test]
    fn hooks_fire_after_matching_tools() {
        let mut s = session(vec![ModelResponse::with_calls("", vec![echo("a")]), ModelResponse::text("TERMINATE")]);
        let mut cfg = LoopConfig::with_prompt("go");
        cfg.hooks.push(Hook::new("note", Trigger::AfterTool("echo".into()), |_, r| {
            Ok(vec![Message::auto(format!("saw {}", r.unwrap().text))])
        }));
        cfg.hooks.push(Hook::new("broken", Trigger::BeforeModelCall, |_, _| Err("nope".into())));
        let out = s.run_loop(&mut cfg);
        assert_eq!(out.status, LoopStatus::Terminated);
        assert_eq!(out.transcript.messages[3].text(), "saw hi");
    }

    #[test]
    fn memory_is_injected_before_the_user_turn() {
        use crate::memory::HashingEmbedder;
        let mut store = MemoryStore::in_memory(Box::new(HashingEmbedder::default()));
        store
            .remember("the detector deadtime is 2 us", vec![], "old", Utc::now())
            .unwrap();
        let mut s = session(vec![]).with_memory(store, NotabilityRules::default(), 4);
        s.post_user("what is the detector deadtime", &[]).unwrap();
        assert_eq!(s.context.messages[0].role, Role::System);
        assert!(s.context.messages[0].text().starts_with("Relevant memory:"));
        s.post_user("Remember that the stage is slow", &[]).unwrap();
        assert_eq!(s.memory_store().unwrap().len(), 2);
    }

    #[test]
    fn events_follow_seq_order() {
        let seen = Arc::new(std::sync::Mutex::new(Vec::new()));
        let log = seen.clone();
        let mut s = session(vec![ModelResponse::with_calls("", vec![echo("a")]), ModelResponse::text("TERMINATE")])
            .with_events(Arc::new(move |e| {
                if let SessionEvent::MessageAppended { message } = e {
                    log.lock().unwrap().push(message.seq);
                }
            }));
        let out = s.run_loop(&mut LoopConfig::with_prompt("go"));
        let seqs: Vec<u64> = out.transcript.messages.iter().map(|m| m.seq).collect();
        assert_eq!(*seen.lock().unwrap(), seqs);
    }
}

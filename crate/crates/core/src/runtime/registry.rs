use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use super::approval::{ApprovalDecision, ApprovalRequest, ApprovalSource};
use super::tool::{Tool, ToolError, ToolSchema, ToolSpec};
use crate::context::{image_caption, ContentPart, ContextError, ImageOrigin, Message, Role, ToolCall, ToolResult};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("a tool named `{0}` is already registered")]
    DuplicateToolName(String),
    #[error("no tool named `{0}` is registered")]
    UnknownTool(String),
}

/// Per-tool guardrail policy.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ToolPolicy {
    pub requires_approval: bool,
    /// Inclusive numeric limits per parameter, checked before the tool runs.
    #[serde(default)]
    pub limits: BTreeMap<String, (f64, f64)>,
}

impl ToolPolicy {
    /// High-risk tools require approval; declared ranges become hard limits.
    pub fn default_for(spec: &ToolSpec) -> Self {
        let limits = spec.ranges().into_iter().collect();
        ToolPolicy {
            requires_approval: spec.high_risk,
            limits,
        }
    }

    pub fn with_approval(mut self, required: bool) -> Self {
        self.requires_approval = required;
        self
    }

    fn check_limits(&self, args: &Map<String, Value>) -> Result<(), String> {
        for (name, (min, max)) in &self.limits {
            if let Some(v) = args.get(name).and_then(Value::as_f64) {
                if v < *min || v > *max {
                    return Err(format!(
                        "guardrail: parameter '{name}' = {v} is outside the allowed range [{min}, {max}]"
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Progress notifications emitted while calls are dispatched.
#[derive(Debug, Clone)]
pub enum DispatchEvent<'a> {
    Started(&'a ToolCall),
    Finished(&'a ToolResult),
}

struct Entry {
    tool: Box<dyn Tool>,
    spec: ToolSpec,
    schema: ToolSchema,
    policy: ToolPolicy,
}

/// Ordered registry of the tools available to one agent.
#[derive(Default)]
pub struct ToolRegistry {
    entries: Vec<Entry>,
    decisions: Vec<ApprovalDecision>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, tool: Box<dyn Tool>) -> Result<(), RegistryError> {
        let policy = ToolPolicy::default_for(&tool.spec());
        self.register_with_policy(tool, policy)
    }

    pub fn register_with_policy(&mut self, tool: Box<dyn Tool>, policy: ToolPolicy) -> Result<(), RegistryError> {
        let spec = tool.spec();
        if self.entry(&spec.name).is_some() {
            return Err(RegistryError::DuplicateToolName(spec.name));
        }
        let schema = spec.schema();
        self.entries.push(Entry {
            tool,
            spec,
            schema,
            policy,
        });
        Ok(())
    }

    fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.spec.name == name)
    }

    fn entry_mut(&mut self, name: &str) -> Option<&mut Entry> {
        self.entries.iter_mut().find(|e| e.spec.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.spec.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entry(name).is_some()
    }

    /// Schemas in registration order.
    pub fn schemas(&self) -> Vec<ToolSchema> {
        self.entries.iter().map(|e| e.schema.clone()).collect()
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.entry(name).map(|e| &e.spec)
    }

    pub fn policy(&self, name: &str) -> Option<&ToolPolicy> {
        self.entry(name).map(|e| &e.policy)
    }

    pub fn set_policy(&mut self, name: &str, policy: ToolPolicy) -> Result<(), RegistryError> {
        let entry = self
            .entry_mut(name)
            .ok_or_else(|| RegistryError::UnknownTool(name.into()))?;
        entry.policy = policy;
        Ok(())
    }

    pub fn decisions(&self) -> &[ApprovalDecision] {
        &self.decisions
    }

    /// Validates arguments against the declared parameters without running
    /// the tool. Used by the MCP server to answer with `invalid_params`.
    pub fn validate(&self, name: &str, args: &Map<String, Value>) -> Result<(), ToolError> {
        let entry = self
            .entry(name)
            .ok_or_else(|| ToolError::Failed(format!("unknown tool '{name}'")))?;
        entry.spec.validate(args)
    }

    pub fn execute_calls(&mut self, calls: &[ToolCall], approvals: &dyn ApprovalSource) -> Vec<ToolResult> {
        self.execute_calls_observed(calls, approvals, &mut |_| {})
    }

    /// Executes calls strictly one after another in the listed order.
    ///
    /// Failures never abort the batch: an unknown tool, invalid arguments, a
    /// guardrail violation, a denial or a tool error all become error results
    /// and the next call still runs.
    pub fn execute_calls_observed(
        &mut self,
        calls: &[ToolCall],
        approvals: &dyn ApprovalSource,
        observer: &mut dyn FnMut(DispatchEvent<'_>),
    ) -> Vec<ToolResult> {
        let mut results = Vec::with_capacity(calls.len());
        for call in calls {
            observer(DispatchEvent::Started(call));
            let result = self.execute_one(call, approvals);
            observer(DispatchEvent::Finished(&result));
            results.push(result);
        }
        results
    }

    fn execute_one(&mut self, call: &ToolCall, approvals: &dyn ApprovalSource) -> ToolResult {
        let available = self.names().join(", ");
        let Some(index) = self.entries.iter().position(|e| e.spec.name == call.tool_name) else {
            return ToolResult::error(
                &call.id,
                format!(
                    "Error: unknown tool '{}'. Available tools: {available}.",
                    call.tool_name
                ),
            );
        };
        let Some(args) = call.arguments() else {
            return ToolResult::error(&call.id, "Error: tool arguments must be a JSON object.");
        };
        let entry = &self.entries[index];
        if let Err(e) = entry.spec.validate(&args) {
            return ToolResult::error(&call.id, format!("Error: {e}"));
        }
        if let Err(msg) = entry.policy.check_limits(&args) {
            return ToolResult::error(&call.id, format!("Error: {msg}"));
        }
        if entry.policy.requires_approval {
            let request = ApprovalRequest {
                call_id: call.id.clone(),
                tool_name: call.tool_name.clone(),
                arguments: serde_json::to_string_pretty(&Value::Object(args.clone()))
                    .unwrap_or_else(|_| call.arguments_json.clone()),
            };
            let decision = approvals.decide(&request);
            let approved = decision.approved;
            let decider = decision.decider.clone();
            self.decisions.push(decision);
            if !approved {
                return ToolResult::denied(
                    &call.id,
                    format!(
                        "The call to '{}' was denied by {decider}; the tool was not executed.",
                        call.tool_name
                    ),
                );
            }
        }
        match self.entries[index].tool.call(&args) {
            Ok(out) => ToolResult::ok(&call.id, out.text, out.image_paths),
            Err(e) => ToolResult::error(&call.id, format!("Error: {e}")),
        }
    }
}

/// Turns a tool result into context messages: the tool message, followed by
/// one auxiliary `auto` message carrying the images when there are any.
pub fn postprocess_result(result: &ToolResult) -> Result<Vec<Message>, ContextError> {
    let mut out = vec![Message::tool(result.clone())];
    if result.image_paths.is_empty() {
        return Ok(out);
    }
    let mut parts = vec![ContentPart::text(image_caption(&result.call_id))];
    for path in &result.image_paths {
        if !path.is_file() {
            return Err(ContextError::MissingImageFile(path.clone()));
        }
        parts.push(ContentPart::image(path.clone(), ImageOrigin::Tool));
    }
    out.push(Message::with_parts(Role::Auto, parts));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::approval::{AutoApprove, DenyAll, ScriptedApprovals};
    use crate::runtime::tool::{ParamDecl, ToolOutput};
    use serde_json::json;
    use std::sync::{Arc, Mutex};

    struct Recorder {
        name: &'static str,
        log: Arc<Mutex<Vec<String>>>,
        fail: bool,
        high_risk: bool,
    }

    impl Tool for Recorder {
        fn spec(&self) -> ToolSpec {
            let spec = ToolSpec::new(
                self.name,
                "records calls",
                vec![ParamDecl::number("value", "a value").with_range(-10.0, 10.0)],
            );
            if self.high_risk {
                spec.high_risk()
            } else {
                spec
            }
        }

        fn call(&mut self, args: &Map<String, Value>) -> Result<ToolOutput, ToolError> {
            self.log.lock().unwrap().push(format!("{}:{}", self.name, args["value"]));
            if self.fail {
                Err(ToolError::Failed("boom".into()))
            } else {
                Ok(ToolOutput::text(format!("{} ok", self.name)))
            }
        }
    }

    fn recorder(name: &'static str, log: &Arc<Mutex<Vec<String>>>) -> Box<Recorder> {
        Box::new(Recorder {
            name,
            log: log.clone(),
            fail: false,
            high_risk: false,
        })
    }

    fn call(id: &str, name: &str, value: f64) -> ToolCall {
        ToolCall::new(id, name, json!({ "value": value }))
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let log = Arc::default();
        let mut reg = ToolRegistry::new();
        reg.register(recorder("a", &log)).unwrap();
        assert!(matches!(
            reg.register(recorder("a", &log)),
            Err(RegistryError::DuplicateToolName(n)) if n == "a"
        ));
    }

    #[test]
    fn high_risk_tools_require_approval_by_default() {
        let log = Arc::default();
        let mut reg = ToolRegistry::new();
        reg.register(Box::new(Recorder {
            name: "python_exec",
            log,
            fail: false,
            high_risk: true,
        }))
        .unwrap();
        assert!(reg.policy("python_exec").unwrap().requires_approval);
    }

    #[test]
    fn calls_run_in_listed_order_and_failures_do_not_stop_the_batch() {
        let log: Arc<Mutex<Vec<String>>> = Arc::default();
        let mut reg = ToolRegistry::new();
        reg.register(recorder("first", &log)).unwrap();
        reg.register(Box::new(Recorder {
            name: "broken",
            log: log.clone(),
            fail: true,
            high_risk: false,
        }))
        .unwrap();
        reg.register(recorder("second", &log)).unwrap();
        let calls = [
            call("1", "second", 1.0),
            call("2", "broken", 2.0),
            call("3", "frobnicate", 0.0),
            call("4", "first", 3.0),
        ];
        let results = reg.execute_calls(&calls, &AutoApprove);
        let ids: Vec<_> = results.iter().map(|r| r.call_id.as_str()).collect();
        assert_eq!(ids, ["1", "2", "3", "4"]);
        assert!(!results[0].is_error);
        assert!(results[1].is_error && results[1].text.contains("boom"));
        assert!(results[2].is_error && results[2].text.contains("unknown tool 'frobnicate'"));
        assert_eq!(*log.lock().unwrap(), ["second:1.0", "broken:2.0", "first:3.0"]);
    }

    #[test]
    fn denial_short_circuits_the_tool_body() {
        let log: Arc<Mutex<Vec<String>>> = Arc::default();
        let mut reg = ToolRegistry::new();
        let tool = recorder("guarded", &log);
        let policy = ToolPolicy::default_for(&tool.spec()).with_approval(true);
        reg.register_with_policy(tool, policy).unwrap();
        let results = reg.execute_calls(&[call("1", "guarded", 1.0)], &DenyAll);
        assert!(results[0].denied && results[0].is_error);
        assert!(log.lock().unwrap().is_empty());
        assert_eq!(reg.decisions().len(), 1);

        let approvals = ScriptedApprovals::new([true]);
        let results = reg.execute_calls(&[call("2", "guarded", 1.5)], &approvals);
        assert!(!results[0].is_error);
        assert_eq!(approvals.requests()[0].tool_name, "guarded");
        assert!(approvals.requests()[0].arguments.contains("\"value\": 1.5"));
    }

    #[test]
    fn range_limits_are_checked_before_invocation() {
        let log: Arc<Mutex<Vec<String>>> = Arc::default();
        let mut reg = ToolRegistry::new();
        reg.register(recorder("a", &log)).unwrap();
        let results = reg.execute_calls(&[call("1", "a", 11.0)], &AutoApprove);
        assert!(results[0].is_error);
        assert!(results[0].text.contains("guardrail"));
        assert!(log.lock().unwrap().is_empty());
    }

    #[test]
    fn schemas_are_deterministic() {
        let log = Arc::default();
        let build = || {
            let mut reg = ToolRegistry::new();
            reg.register(recorder("b", &log)).unwrap();
            reg.register(recorder("a", &log)).unwrap();
            serde_json::to_string(&reg.schemas()).unwrap()
        };
        let first = build();
        assert_eq!(first, build());
        assert!(first.find("\"b\"").unwrap() < first.find("\"a\"").unwrap());
    }

    #[test]
    fn postprocess_emits_image_message_only_when_needed() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("x.png");
        std::fs::write(&img, b"png").unwrap();
        let with_image = postprocess_result(&ToolResult::ok("c", "t", vec![img])).unwrap();
        assert_eq!(with_image.len(), 2);
        assert_eq!(with_image[1].role, Role::Auto);
        assert_eq!(with_image[1].image_paths().count(), 1);

        let plain = postprocess_result(&ToolResult::ok("c", "t", vec![])).unwrap();
        assert_eq!(plain.len(), 1);
        let err = postprocess_result(&ToolResult::error("c", "bad")).unwrap();
        assert_eq!(err.len(), 1);
        assert_eq!(err[0].text(), "bad");

        assert!(postprocess_result(&ToolResult::ok("c", "t", vec!["/no/such.png".into()])).is_err());
    }
}

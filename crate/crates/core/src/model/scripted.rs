use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{ChatModel, ModelError, ModelResponse};
use crate::context::{Context, ToolCall};
use crate::runtime::ToolSchema;
use crate::wire::{count_image_blocks, render_for_wire};

type Predicate = Arc<dyn Fn(&[Value]) -> bool + Send + Sync>;

/// Assertion on the rendered wire input of one completion.
#[derive(Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    /// At least one image block anywhere in the input.
    InputContainsImage,
    /// Some message text contains the given string.
    InputContainsText(String),
    #[serde(skip)]
    Custom(String, Predicate),
}

impl fmt::Debug for Expectation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expectation::InputContainsImage => f.write_str("InputContainsImage"),
            Expectation::InputContainsText(s) => write!(f, "InputContainsText({s:?})"),
            Expectation::Custom(label, _) => write!(f, "Custom({label})"),
        }
    }
}

impl Expectation {
    pub fn custom(label: &str, predicate: impl Fn(&[Value]) -> bool + Send + Sync + 'static) -> Self {
        Expectation::Custom(label.into(), Arc::new(predicate))
    }

    fn holds(&self, wire: &[Value]) -> bool {
        match self {
            Expectation::InputContainsImage => wire.iter().any(|m| count_image_blocks(m) > 0),
            Expectation::InputContainsText(needle) => wire.iter().any(|m| match &m["content"] {
                Value::String(s) => s.contains(needle.as_str()),
                Value::Array(parts) => parts
                    .iter()
                    .any(|p| p["text"].as_str().is_some_and(|t| t.contains(needle.as_str()))),
                _ => false,
            }),
            Expectation::Custom(_, predicate) => predicate(wire),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptEntry {
    pub expect: Option<Expectation>,
    pub response: ModelResponse,
}

impl From<ModelResponse> for ScriptEntry {
    fn from(response: ModelResponse) -> Self {
        ScriptEntry { expect: None, response }
    }
}

/// Deterministic model that returns canned responses in order.
pub struct ScriptedModel {
    script: Vec<ScriptEntry>,
    cursor: Mutex<usize>,
    repeat: bool,
}

impl ScriptedModel {
    pub fn new(entries: impl IntoIterator<Item = impl Into<ScriptEntry>>) -> Self {
        ScriptedModel {
            script: entries.into_iter().map(Into::into).collect(),
            cursor: Mutex::new(0),
            repeat: false,
        }
    }

    /// Restart from the first entry instead of failing when exhausted.
    pub fn repeating(mut self) -> Self {
        self.repeat = true;
        self
    }

    pub fn from_file(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ModelError::Config(format!("cannot read script {}: {e}", path.display())))?;
        let file: ScriptFile =
            serde_json::from_str(&text).map_err(|e| ModelError::Config(format!("invalid script {}: {e}", path.display())))?;
        Ok(file.into_model())
    }

    pub fn remaining(&self) -> usize {
        self.script.len().saturating_sub(*self.cursor.lock().unwrap())
    }

    pub fn consumed(&self) -> usize {
        *self.cursor.lock().unwrap()
    }
}

impl ChatModel for ScriptedModel {
    fn complete(&self, context: &Context, _schemas: &[ToolSchema]) -> Result<ModelResponse, ModelError> {
        let started = Instant::now();
        let entry = {
            let mut cursor = self.cursor.lock().unwrap();
            if *cursor >= self.script.len() {
                if !self.repeat || self.script.is_empty() {
                    return Err(ModelError::ScriptExhausted);
                }
                *cursor = 0;
            }
            let entry = self.script[*cursor].clone();
            *cursor += 1;
            entry
        };
        if let Some(expect) = &entry.expect {
            let wire = render_for_wire(context)?;
            if !expect.holds(&wire) {
                return Err(ModelError::ScriptExpectationFailed(format!("{expect:?}")));
            }
        }
        let mut response = entry.response;
        response.latency = started.elapsed().as_secs_f64();
        Ok(response)
    }

    fn name(&self) -> String {
        "scripted".into()
    }
}

/// On-disk script format.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptFile {
    #[serde(default)]
    pub repeat: bool,
    pub responses: Vec<ScriptFileEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFileEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect: Option<Expectation>,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ScriptFileCall>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptFileCall {
    #[serde(default)]
    pub id: Option<String>,
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

impl ScriptFile {
    pub fn from_responses<'a>(responses: impl IntoIterator<Item = &'a ModelResponse>) -> Self {
        let responses = responses
            .into_iter()
            .map(|r| ScriptFileEntry {
                expect: None,
                text: r.text.clone(),
                tool_calls: r
                    .tool_calls
                    .iter()
                    .map(|c| ScriptFileCall {
                        id: Some(c.id.clone()),
                        name: c.tool_name.clone(),
                        arguments: serde_json::from_str(&c.arguments_json).unwrap_or(Value::Null),
                    })
                    .collect(),
            })
            .collect();
        ScriptFile {
            repeat: false,
            responses,
        }
    }

    pub fn into_model(self) -> ScriptedModel {
        let entries: Vec<ScriptEntry> = self
            .responses
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let calls = e
                    .tool_calls
                    .into_iter()
                    .enumerate()
                    .map(|(j, c)| {
                        let args = if c.arguments.is_null() {
                            Value::Object(Default::default())
                        } else {
                            c.arguments
                        };
                        ToolCall::new(c.id.unwrap_or_else(|| format!("call_{i}_{j}")), c.name, args)
                    })
                    .collect();
                ScriptEntry {
                    expect: e.expect,
                    response: ModelResponse::with_calls(e.text, calls),
                }
            })
            .collect();
        let model = ScriptedModel::new(entries);
        if self.repeat {
            model.repeating()
        } else {
            model
        }
    }
}

/// Wraps a model and records every successful response, so a run driven by
/// any model can later be replayed through a [`ScriptedModel`].
pub struct RecordingModel {
    inner: Arc<dyn ChatModel>,
    log: Mutex<Vec<ModelResponse>>,
}

impl RecordingModel {
    pub fn new(inner: Arc<dyn ChatModel>) -> Self {
        RecordingModel {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn script(&self) -> ScriptFile {
        ScriptFile::from_responses(self.log.lock().unwrap().iter())
    }
}

impl ChatModel for RecordingModel {
    fn complete(&self, context: &Context, schemas: &[ToolSchema]) -> Result<ModelResponse, ModelError> {
        let response = self.inner.complete(context, schemas)?;
        self.log.lock().unwrap().push(response.clone());
        Ok(response)
    }

    fn name(&self) -> String {
        self.inner.name()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Message;
    use serde_json::json;

    fn ctx() -> Context {
        let mut c = Context::new("s");
        c.append(Message::user("hello")).unwrap();
        c
    }

    #[test]
    fn terminate_passes_through() {
        let model = ScriptedModel::new([ModelResponse::text("TERMINATE")]);
        let r = model.complete(&ctx(), &[]).unwrap();
        assert_eq!(r.text, "TERMINATE");
        assert!(r.tool_calls.is_empty());
    }

    #[test]
    fn tool_call_passes_through() {
        let call = ToolCall::new("c1", "acquire_image_2d", json!({"x": 0, "y": 0, "width": 10, "height": 10, "step": 1}));
        let model = ScriptedModel::new([ModelResponse::with_calls("", vec![call.clone()])]);
        let r = model.complete(&ctx(), &[]).unwrap();
        assert_eq!(r.tool_calls, vec![call]);
    }

    #[test]
    fn exhaustion_after_script_length() {
        let model = ScriptedModel::new((0..3).map(|i| ModelResponse::text(format!("r{i}"))));
        let c = ctx();
        let texts: Vec<_> = (0..3).map(|_| model.complete(&c, &[]).unwrap().text).collect();
        assert_eq!(texts, ["r0", "r1", "r2"]);
        assert!(matches!(model.complete(&c, &[]), Err(ModelError::ScriptExhausted)));
    }

    #[test]
    fn failed_expectation_is_reported() {
        let model = ScriptedModel::new([ScriptEntry {
            expect: Some(Expectation::InputContainsImage),
            response: ModelResponse::text("x"),
        }]);
        assert!(matches!(
            model.complete(&ctx(), &[]),
            Err(ModelError::ScriptExpectationFailed(_))
        ));
    }

    #[test]
    fn scripted_latency_is_small() {
        let model = ScriptedModel::new([ModelResponse::text("a")]);
        let r = model.complete(&ctx(), &[]).unwrap();
        assert!(r.latency >= 0.0 && r.latency < 0.05);
    }

    #[test]
    fn script_file_round_trip_through_recording() {
        let call = ToolCall::new("c1", "move_stage", json!({"x": 1.0, "y": 2.0}));
        let original = ScriptedModel::new([
            ModelResponse::with_calls("moving", vec![call]),
            ModelResponse::text("TERMINATE"),
        ]);
        let recorder = RecordingModel::new(Arc::new(original));
        let c = ctx();
        let a = recorder.complete(&c, &[]).unwrap();
        let b = recorder.complete(&c, &[]).unwrap();
        let text = serde_json::to_string(&recorder.script()).unwrap();
        let replay = serde_json::from_str::<ScriptFile>(&text).unwrap().into_model();
        let mut a2 = replay.complete(&c, &[]).unwrap();
        let mut b2 = replay.complete(&c, &[]).unwrap();
        a2.latency = a.latency;
        b2.latency = b.latency;
        assert_eq!((a2, b2), (a, b));
    }

    #[test]
    fn expectation_parses_from_json() {
        let file: ScriptFile = serde_json::from_value(json!({
            "responses": [{"expect": {"input_contains_text": "grid"}, "text": "ok"}]
        }))
        .unwrap();
        let model = file.into_model();
        assert!(model.complete(&ctx(), &[]).is_err());
    }
}

//! Access to vision-language models.
//!
//! [`ChatModel`] is the single seam between the task engine and inference:
//! [`OpenAiModel`] talks to any OpenAI-compatible chat-completions endpoint and
//! [`ScriptedModel`] replays canned responses for deterministic runs.

mod openai;
mod scripted;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{Context, ContextError, ToolCall};
use crate::runtime::ToolSchema;

pub use openai::{build_request, parse_response, OpenAiModel};
pub use scripted::{Expectation, RecordingModel, ScriptEntry, ScriptFile, ScriptedModel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("HTTP status {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("arguments of tool call `{call_id}` ({tool_name}) are not a JSON object: {raw}")]
    MalformedToolArguments {
        call_id: String,
        tool_name: String,
        raw: String,
    },
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("scripted model has no responses left")]
    ScriptExhausted,
    #[error("script expectation failed: {0}")]
    ScriptExpectationFailed(String),
    #[error("cannot render context: {0}")]
    Render(#[from] ContextError),
    #[error("invalid model configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReasoningEffort {
    Minimal,
    Low,
    Medium,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default, skip_serializing)]
    pub api_key: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub reasoning_effort: Option<ReasoningEffort>,
    /// Request timeout in seconds.
    #[serde(default = "default_timeout")]
    pub timeout: f64,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_timeout() -> f64 {
    120.0
}

pub const ENV_BASE_URL: &str = "EAA_MODEL_BASE_URL";
pub const ENV_MODEL_NAME: &str = "EAA_MODEL_NAME";
pub const ENV_API_KEY: &str = "EAA_API_KEY";

impl ModelConfig {
    pub fn new(base_url: &str, model_name: &str, api_key: &str) -> Self {
        ModelConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key: api_key.into(),
            temperature: default_temperature(),
            reasoning_effort: None,
            timeout: default_timeout(),
        }
    }

    /// Fills missing fields from `EAA_MODEL_BASE_URL`, `EAA_MODEL_NAME` and `EAA_API_KEY`.
    pub fn from_env() -> Result<Self, ModelError> {
        let get = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let base_url = get(ENV_BASE_URL).unwrap_or_else(|| "https://api.openai.com/v1".into());
        let model_name = get(ENV_MODEL_NAME).ok_or_else(|| ModelError::Config(format!("{ENV_MODEL_NAME} is not set")))?;
        let api_key = get(ENV_API_KEY).ok_or_else(|| ModelError::Config(format!("{ENV_API_KEY} is not set")))?;
        let config = ModelConfig::new(&base_url, &model_name, &api_key);
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.temperature >= 0.0) {
            return Err(ModelError::Config("temperature must be >= 0".into()));
        }
        if !(self.timeout > 0.0) {
            return Err(ModelError::Config("timeout must be > 0".into()));
        }
        if self.api_key.is_empty() {
            return Err(ModelError::Config("missing API key".into()));
        }
        if self.model_name.is_empty() {
            return Err(ModelError::Config("missing model name".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCall>,
    #[serde(default)]
    pub usage: Option<Usage>,
    /// Wall-clock seconds spent producing the response.
    #[serde(default)]
    pub latency: f64,
}

impl ModelResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ModelResponse {
            text: text.into(),
            ..Default::default()
        }
    }

    pub fn with_calls(text: impl Into<String>, tool_calls: Vec<ToolCall>) -> Self {
        ModelResponse {
            text: text.into(),
            tool_calls,
            ..Default::default()
        }
    }
}

/// A chat model. Implementations must not mutate the context they are given.
pub trait ChatModel: Send + Sync {
    fn complete(&self, context: &Context, schemas: &[ToolSchema]) -> Result<ModelResponse, ModelError>;

    fn name(&self) -> String {
        "model".into()
    }
}

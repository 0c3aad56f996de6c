use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{ChatModel, ModelConfig, ModelError, ModelResponse, Usage};
use crate::context::{Context, ToolCall};
use crate::runtime::ToolSchema;
use crate::wire::render_for_wire;

/// Client for `POST {base_url}/chat/completions`.
pub struct OpenAiModel {
    config: ModelConfig,
    agent: ureq::Agent,
}

impl OpenAiModel {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(OpenAiModel { config, agent })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn post(&self, body: &Value) -> Result<(u16, String), ureq::Error> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut response = self
            .agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", self.config.api_key))
            .send_json(body)?;
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string()?;
        Ok((status, text))
    }
}

pub fn build_request(context: &Context, schemas: &[ToolSchema], config: &ModelConfig) -> Result<Value, ModelError> {
    let messages = render_for_wire(context)?;
    let mut body = json!({
        "model": config.model_name,
        "messages": messages,
        "temperature": config.temperature,
    });
    if !schemas.is_empty() {
        body["tools"] = Value::Array(schemas.iter().map(ToolSchema::to_openai).collect());
    }
    if let Some(effort) = config.reasoning_effort {
        body["reasoning_effort"] = serde_json::to_value(effort).unwrap_or(Value::Null);
    }
    Ok(body)
}

/// Extracts text, tool calls and usage from a chat-completions response body.
pub fn parse_response(body: &Value) -> Result<ModelResponse, ModelError> {
    let message = body
        .pointer("/choices/0/message")
        .ok_or_else(|| ModelError::InvalidResponse("no choices[0].message".into()))?;
    let text = match &message["content"] {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    };
    let mut tool_calls = Vec::new();
    if let Some(calls) = message["tool_calls"].as_array() {
        for (index, call) in calls.iter().enumerate() {
            let id = call["id"]
                .as_str()
                .map(str::to_string)
                .unwrap_or_else(|| format!("call_{index}"));
            let name = call
                .pointer("/function/name")
                .and_then(Value::as_str)
                .ok_or_else(|| ModelError::InvalidResponse("tool call without function name".into()))?;
            let raw = match call.pointer("/function/arguments") {
                Some(Value::String(s)) => s.clone(),
                Some(other) => other.to_string(),
                None => String::new(),
            };
            let raw_or_empty = if raw.trim().is_empty() { "{}".to_string() } else { raw };
            match serde_json::from_str::<Value>(&raw_or_empty) {
                Ok(Value::Object(_)) => tool_calls.push(ToolCall {
                    id,
                    tool_name: name.to_string(),
                    arguments_json: raw_or_empty,
                }),
                _ => {
                    return Err(ModelError::MalformedToolArguments {
                        call_id: id,
                        tool_name: name.to_string(),
                        raw: raw_or_empty,
                    })
                }
            }
        }
    }
    let usage = body.get("usage").map(|u| Usage {
        prompt_tokens: u["prompt_tokens"].as_u64().unwrap_or(0),
        completion_tokens: u["completion_tokens"].as_u64().unwrap_or(0),
    });
    Ok(ModelResponse {
        text,
        tool_calls,
        usage,
        latency: 0.0,
    })
}

impl ChatModel for OpenAiModel {
    fn complete(&self, context: &Context, schemas: &[ToolSchema]) -> Result<ModelResponse, ModelError> {
        let body = build_request(context, schemas, &self.config)?;
        let started = Instant::now();
        // one retry on transport failures, none on HTTP status errors
        let (status, text) = match self.post(&body) {
            Ok(r) => r,
            Err(first) => {
                log::warn!("model request failed ({first}); retrying once");
                self.post(&body)
                    .map_err(|e| ModelError::EndpointUnreachable(e.to_string()))?
            }
        };
        if !(200..300).contains(&status) {
            return Err(ModelError::HttpStatus { code: status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ModelError::InvalidResponse(e.to_string()))?;
        let mut response = parse_response(&value)?;
        response.latency = started.elapsed().as_secs_f64();
        Ok(response)
    }

    fn name(&self) -> String {
        self.config.model_name.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::Message;
    use crate::runtime::{ParamDecl, ToolSpec};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves the given canned responses, one per connection, and forwards
    /// each received request body.
    fn fake_endpoint(responses: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut headers = String::new();
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                    headers.push_str(&line);
                }
                let mut buf = vec![0; length];
                reader.read_exact(&mut buf).unwrap();
                tx.send((headers, String::from_utf8(buf).unwrap())).unwrap();
                let mut stream = stream;
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn context() -> Context {
        let mut ctx = Context::new("s");
        ctx.append(Message::user("hi")).unwrap();
        ctx
    }

    #[test]
    fn request_carries_tools_and_bearer_token() {
        let reply = json!({
            "choices": [{"message": {"role": "assistant", "content": null, "tool_calls": [
                {"id": "c1", "type": "function", "function": {"name": "acquire_image_2d", "arguments": "{\"x\":0,\"y\":0}"}}
            ]}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 3}
        });
        let (url, rx) = fake_endpoint(vec![(200, reply.to_string())]);
        let model = OpenAiModel::new(ModelConfig::new(&url, "gpt-test", "secret")).unwrap();
        let schema = ToolSpec::new("acquire_image_2d", "scan", vec![ParamDecl::number("x", "x")]).schema();
        let response = model.complete(&context(), &[schema]).unwrap();
        assert_eq!(response.tool_calls.len(), 1);
        assert_eq!(response.tool_calls[0].tool_name, "acquire_image_2d");
        assert_eq!(response.usage.unwrap().prompt_tokens, 10);
        assert!(response.latency >= 0.0);

        let (headers, body) = rx.recv().unwrap();
        assert!(headers.to_ascii_lowercase().contains("authorization: bearer secret"));
        let body: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["model"], "gpt-test");
        assert_eq!(body["temperature"], 1.0);
        assert_eq!(body["tools"][0]["function"]["name"], "acquire_image_2d");
        assert_eq!(body["messages"][0]["content"], "hi");
    }

    #[test]
    fn http_4xx_is_not_retried() {
        let (url, rx) = fake_endpoint(vec![(401, "{\"error\":\"no\"}".into())]);
        let model = OpenAiModel::new(ModelConfig::new(&url, "m", "k")).unwrap();
        let err = model.complete(&context(), &[]).unwrap_err();
        assert!(matches!(err, ModelError::HttpStatus { code: 401, .. }));
        assert!(rx.recv().is_ok());
        assert!(rx.try_recv().is_err());
    }

    #[test]
    fn unreachable_endpoint_is_reported() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut config = ModelConfig::new(&format!("http://127.0.0.1:{port}"), "m", "k");
        config.timeout = 2.0;
        let model = OpenAiModel::new(config).unwrap();
        assert!(matches!(
            model.complete(&context(), &[]),
            Err(ModelError::EndpointUnreachable(_))
        ));
    }

    #[test]
    fn malformed_arguments_fixture() {
        let raw = "{not json";
        // oracle: a JSON parser rejects the fixture outright
        assert!(serde_json::from_str::<Value>(raw).is_err());
        let body = json!({"choices": [{"message": {"content": "", "tool_calls": [
            {"id": "c9", "function": {"name": "move_stage", "arguments": raw}}
        ]}}]});
        match parse_response(&body) {
            Err(ModelError::MalformedToolArguments { call_id, raw: r, .. }) => {
                assert_eq!(call_id, "c9");
                assert_eq!(r, raw);
            }
            other => panic!("unexpected {other:?}"),
        }
        let array_args = json!({"choices": [{"message": {"tool_calls": [
            {"id": "c1", "function": {"name": "m", "arguments": "[1,2]"}}
        ]}}]});
        assert!(matches!(
            parse_response(&array_args),
            Err(ModelError::MalformedToolArguments { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::new("http://x", "m", "k");
        assert!(c.validate().is_ok());
        c.temperature = -0.1;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::new("http://x", "m", "");
        assert!(c.validate().is_err());
        c.api_key = "k".into();
        c.timeout = 0.0;
        assert!(c.validate().is_err());
    }
}

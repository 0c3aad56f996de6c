//! Rendering of a [`Context`] into OpenAI chat-completions messages.
//!
//! Most OpenAI-compatible endpoints reject images inside tool messages, so
//! every tool message whose result carries N image paths is followed by one
//! user message holding exactly N base64 image blocks and a caption naming the
//! originating call. When the context already stores that auxiliary message
//! (the runtime's post-processing step writes it), it is rendered in place
//! instead of being injected a second time.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde_json::{json, Value};

use crate::context::{image_caption, ContentPart, Context, ContextError, Message, Role, ToolResult};

pub fn render_for_wire(context: &Context) -> Result<Vec<Value>, ContextError> {
    let messages = &context.messages;
    let mut wire = Vec::with_capacity(messages.len());
    for (index, message) in messages.iter().enumerate() {
        wire.push(render_message(message)?);
        if let Some(result) = &message.tool_result {
            if result.image_paths.is_empty() {
                continue;
            }
            let stored = messages
                .get(index + 1)
                .is_some_and(|next| is_auxiliary_for(next, result));
            if !stored {
                wire.push(auxiliary_image_message(result)?);
            }
        }
    }
    Ok(wire)
}

/// Whether `message` is the stored auxiliary image message for `result`.
pub fn is_auxiliary_for(message: &Message, result: &ToolResult) -> bool {
    if !matches!(message.role, Role::Auto | Role::User) {
        return false;
    }
    let caption = image_caption(&result.call_id);
    let has_caption = message
        .parts
        .iter()
        .any(|p| matches!(p, ContentPart::Text { text } if *text == caption));
    has_caption && message.image_paths().count() == result.image_paths.len()
}

fn auxiliary_image_message(result: &ToolResult) -> Result<Value, ContextError> {
    let mut content = vec![json!({"type": "text", "text": image_caption(&result.call_id)})];
    for path in &result.image_paths {
        content.push(image_block(path, crate::context::media_type_for(path))?);
    }
    Ok(json!({"role": "user", "content": content}))
}

fn image_block(path: &Path, media_type: &str) -> Result<Value, ContextError> {
    let bytes = std::fs::read(path).map_err(|_| ContextError::MissingImageFile(path.to_path_buf()))?;
    let url = format!("data:{media_type};base64,{}", BASE64.encode(bytes));
    Ok(json!({"type": "image_url", "image_url": {"url": url}}))
}

fn render_message(message: &Message) -> Result<Value, ContextError> {
    let role = message.role.wire_name();
    match message.role {
        Role::Tool => {
            let result = message.tool_result.as_ref().expect("tool message has a result");
            Ok(json!({
                "role": role,
                "tool_call_id": result.call_id,
                "content": result.text,
            }))
        }
        Role::Assistant => {
            let text = message.text();
            let mut out = json!({
                "role": role,
                "content": if text.is_empty() && !message.tool_calls.is_empty() { Value::Null } else { Value::String(text) },
            });
            if !message.tool_calls.is_empty() {
                let calls: Vec<Value> = message
                    .tool_calls
                    .iter()
                    .map(|c| {
                        json!({
                            "id": c.id,
                            "type": "function",
                            "function": {"name": c.tool_name, "arguments": c.arguments_json},
                        })
                    })
                    .collect();
                out["tool_calls"] = Value::Array(calls);
            }
            Ok(out)
        }
        _ => {
            let has_images = message.image_paths().next().is_some();
            if !has_images {
                return Ok(json!({"role": role, "content": message.text()}));
            }
            let mut content = Vec::new();
            for part in &message.parts {
                match part {
                    ContentPart::Text { text } => content.push(json!({"type": "text", "text": text})),
                    ContentPart::ImageRef { path, media_type, .. } => {
                        content.push(image_block(path, media_type)?)
                    }
                }
            }
            Ok(json!({"role": role, "content": content}))
        }
    }
}

/// Number of image blocks in a rendered wire message.
pub fn count_image_blocks(message: &Value) -> usize {
    message["content"]
        .as_array()
        .map(|parts| parts.iter().filter(|p| p["type"] == "image_url").count())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::context::{ImageOrigin, ToolCall};

    fn png(dir: &Path, name: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, b"\x89PNG fake").unwrap();
        path
    }

    fn with_tool_result(images: Vec<std::path::PathBuf>) -> Context {
        let mut ctx = Context::new("s");
        ctx.append(Message::user("go")).unwrap();
        ctx.append(Message::assistant(
            "",
            vec![ToolCall::new("c1", "acquire_image_2d", serde_json::json!({}))],
        ))
        .unwrap();
        ctx.append(Message::tool(ToolResult::ok("c1", "done", images))).unwrap();
        ctx
    }

    #[test]
    fn single_image_is_injected_after_tool_message() {
        let dir = tempfile::tempdir().unwrap();
        let ctx = with_tool_result(vec![png(dir.path(), "scan_001.png")]);
        let wire = render_for_wire(&ctx).unwrap();
        assert_eq!(wire.len(), 4);
        assert_eq!(wire[2]["role"], "tool");
        assert_eq!(wire[3]["role"], "user");
        assert_eq!(count_image_blocks(&wire[3]), 1);
        assert_eq!(wire[3]["content"][0]["text"], "Image(s) produced by tool call c1");
        let url = wire[3]["content"][1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
    }

    #[test]
    fn text_only_context_maps_one_to_one() {
        let mut ctx = Context::new("s");
        ctx.append(Message::system("sys")).unwrap();
        ctx.append(Message::user("a")).unwrap();
        ctx.append(Message::assistant("b", vec![])).unwrap();
        ctx.append(Message::auto("c")).unwrap();
        let wire = render_for_wire(&ctx).unwrap();
        assert_eq!(wire.len(), ctx.len());
        let roles: Vec<_> = wire.iter().map(|m| m["role"].as_str().unwrap()).collect();
        assert_eq!(roles, ["system", "user", "assistant", "user"]);
        assert_eq!(wire[3]["content"], "c");
    }

    #[test]
    fn two_images_produce_two_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let images = vec![png(dir.path(), "a.png"), png(dir.path(), "b.png")];
        let ctx = with_tool_result(images.clone());
        let wire = render_for_wire(&ctx).unwrap();
        assert_eq!(count_image_blocks(&wire[3]), images.len());
    }

    #[test]
    fn stored_auxiliary_message_is_not_duplicated() {
        let dir = tempfile::tempdir().unwrap();
        let img = png(dir.path(), "a.png");
        let mut ctx = with_tool_result(vec![img.clone()]);
        ctx.append(Message::with_parts(
            Role::Auto,
            vec![
                ContentPart::text(image_caption("c1")),
                ContentPart::image(img, ImageOrigin::Tool),
            ],
        ))
        .unwrap();
        let wire = render_for_wire(&ctx).unwrap();
        assert_eq!(wire.len(), 4);
        assert_eq!(count_image_blocks(&wire[3]), 1);
    }

    #[test]
    fn missing_image_fails_rendering() {
        let ctx = with_tool_result(vec!["/nonexistent/x.png".into()]);
        assert!(matches!(render_for_wire(&ctx), Err(ContextError::MissingImageFile(_))));
    }
}

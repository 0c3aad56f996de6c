//! Agent framework for driving a scanning X-ray microscope from natural
//! language: conversation context, tool runtime, model gateway, memory,
//! scan analysis, a virtual beamline, the task engine and an MCP bridge.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod beamline;
pub mod benchmark;
pub mod context;
pub mod engine;
pub mod mcp;
pub mod memory;
pub mod model;
pub mod runtime;
pub mod tools;
pub mod wire;

pub use context::{
    Clock, ContentPart, Context, ContextError, ImageOrigin, Message, Role, SeqSource, ToolCall, ToolResult,
};
pub use memory::{HashingEmbedder, MemoryConfig, MemoryError, MemoryRecord, MemoryStore, NotabilityRules};
pub use model::{ChatModel, ModelConfig, ModelError, ModelResponse, OpenAiModel, ScriptedModel};
pub use runtime::{Tool, ToolError, ToolOutput, ToolRegistry, ToolSchema, ToolSpec};
pub use engine::{Hook, LoopConfig, LoopOutcome, LoopStatus, Session, SessionEvent, Trigger};
pub use mcp::{McpClient, McpError, McpServer};

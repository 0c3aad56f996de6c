//! Tool registry, schema generation and sequential, approval-gated dispatch.

pub mod approval;
mod registry;
pub mod tool;

pub use approval::{
    ApprovalDecision, ApprovalRequest, ApprovalSource, AutoApprove, ChannelApprovals, DenyAll,
    ScriptedApprovals,
};
pub use registry::{postprocess_result, DispatchEvent, RegistryError, ToolPolicy, ToolRegistry};
pub use tool::{ParamDecl, ParamType, Parameters, Tool, ToolError, ToolOutput, ToolSchema, ToolSpec};

//! Tool contract, pool assembly and ordered batch execution.

mod builtin;
mod exec;
pub mod mcp;
mod pool;
pub mod skills;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio_util::sync::CancellationToken;

use crate::permissions::SandboxConfig;
use crate::persistence::FileCheckpoint;

pub use builtin::{builtin_tools, AgentTool, BashTool, FileEditTool, FileReadTool, FileWriteTool, GlobTool, GrepTool, SkillTool, SANDBOX_MARKER};
pub use exec::{execute_streaming, partition_tool_calls, SIBLING_ABORT};
pub use pool::{assemble_tool_pool, PoolConfig, ToolPool, BUILTIN_NAMES, SIMPLE_MODE_TOOLS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolRequest {
    pub tool_use_id: String,
    pub tool_name: String,
    pub input: Value,
}

impl ToolRequest {
    pub fn new(tool_use_id: impl Into<String>, tool_name: impl Into<String>, input: Value) -> Self {
        ToolRequest {
            tool_use_id: tool_use_id.into(),
            tool_name: tool_name.into(),
            input,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    ConcurrentSafe,
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolOrigin {
    Builtin,
    Mcp,
    Skill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub input_schema: Value,
    pub concurrency: Concurrency,
    pub read_only: bool,
    /// `None` means no cap.
    pub max_result_size_chars: Option<usize>,
    pub origin: ToolOrigin,
}

impl ToolSpec {
    pub fn new(name: impl Into<String>, description: impl Into<String>, origin: ToolOrigin) -> Self {
        ToolSpec {
            name: name.into(),
            description: description.into(),
            input_schema: serde_json::json!({"type": "object"}),
            concurrency: Concurrency::Exclusive,
            read_only: false,
            max_result_size_chars: Some(crate::config::DEFAULT_BUDGET_CHARS),
            origin,
        }
    }

    pub fn read_only(mut self) -> Self {
        self.read_only = true;
        self.concurrency = Concurrency::ConcurrentSafe;
        self
    }

    pub fn with_schema(mut self, schema: Value) -> Self {
        self.input_schema = schema;
        self
    }

    pub fn with_cap(mut self, cap: Option<usize>) -> Self {
        self.max_result_size_chars = cap;
        self
    }

    pub fn is_mcp(&self) -> bool {
        self.origin == ToolOrigin::Mcp
    }
}

/// Side products of a tool call that enter the conversation after the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Attachment {
    /// Text injected into the context as an attachment message.
    Context { source: String, text: String },
    /// Allow rules active for the rest of the current turn.
    SessionAllow { rules: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolOutcome {
    pub tool_use_id: String,
    pub content: String,
    pub is_error: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attachments: Vec<Attachment>,
    /// Machine-readable cause for synthesized errors (`sibling_abort`, `user_denied`, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl ToolOutcome {
    pub fn ok(tool_use_id: impl Into<String>, content: impl Into<String>) -> Self {
        ToolOutcome {
            tool_use_id: tool_use_id.into(),
            content: content.into(),
            is_error: false,
            attachments: Vec::new(),
            reason: None,
        }
    }

    pub fn error(tool_use_id: impl Into<String>, content: impl Into<String>) -> Self {
        ToolOutcome {
            is_error: true,
            ..ToolOutcome::ok(tool_use_id, content)
        }
    }

    pub fn with_reason(mut self, reason: impl Into<String>) -> Self {
        self.reason = Some(reason.into());
        self
    }

    pub fn with_attachment(mut self, a: Attachment) -> Self {
        self.attachments.push(a);
        self
    }
}

/// Records a pre-mutation snapshot; the engine's implementation also appends
/// the snapshot event to the transcript before returning.
pub trait CheckpointSink: Send + Sync {
    fn checkpoint(&self, path: &Path) -> crate::Result<FileCheckpoint>;
}

/// Runs a subagent on behalf of the Agent tool.
#[async_trait]
pub trait AgentDelegate: Send + Sync {
    async fn delegate(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome;
}

#[derive(Clone)]
pub struct ToolContext {
    pub project_dir: PathBuf,
    pub session_id: String,
    pub cancel: CancellationToken,
    pub sandbox: SandboxConfig,
    pub checkpoints: Option<Arc<dyn CheckpointSink>>,
    pub delegate: Option<Arc<dyn AgentDelegate>>,
}

impl ToolContext {
    pub fn new(project_dir: impl Into<PathBuf>) -> Self {
        ToolContext {
            project_dir: project_dir.into(),
            session_id: String::new(),
            cancel: CancellationToken::new(),
            sandbox: SandboxConfig::default(),
            checkpoints: None,
            delegate: None,
        }
    }

    /// Resolve a tool path argument against the project directory.
    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.project_dir.join(p)
        }
    }
}

#[async_trait]
pub trait Tool: Send + Sync {
    fn spec(&self) -> ToolSpec;
    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome;
}

/// Minimal structural check of an input against a JSON-schema subset
/// (`type: object`, `required`, and primitive property types).
pub fn validate_input(schema: &Value, input: &Value) -> Result<(), String> {
    if schema.get("type").and_then(Value::as_str) == Some("object") && !input.is_object() {
        return Err("input must be an object".into());
    }
    if let Some(required) = schema.get("required").and_then(Value::as_array) {
        for field in required.iter().filter_map(Value::as_str) {
            if input.get(field).is_none() {
                return Err(format!("missing required field `{field}`"));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(Value::as_object) {
        for (name, prop) in props {
            let Some(value) = input.get(name) else { continue };
            let ok = match prop.get("type").and_then(Value::as_str) {
                Some("string") => value.is_string(),
                Some("integer") => value.is_u64() || value.is_i64(),
                Some("number") => value.is_number(),
                Some("boolean") => value.is_boolean(),
                Some("array") => value.is_array(),
                Some("object") => value.is_object(),
                _ => true,
            };
            if !ok {
                return Err(format!("field `{name}` has the wrong type"));
            }
        }
    }
    Ok(())
}

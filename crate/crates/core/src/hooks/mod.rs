//! Lifecycle hooks: shell commands or in-process callbacks fired at fixed
//! points of the loop, merged into one outcome per firing.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::io::AsyncWriteExt;
use tokio::process::Command;

use crate::error::{Error, Result};
use crate::types::Notification;

pub const DEFAULT_HOOK_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HookEvent {
    PreToolUse,
    PostToolUse,
    PostToolUseFailure,
    PermissionRequest,
    PermissionDenied,
    UserPromptSubmit,
    SessionStart,
    SessionEnd,
    Stop,
    SubagentStop,
    PreCompact,
    PostCompact,
    Notification,
    // Accepted in configuration, never fired.
    Setup,
    StopFailure,
    Elicitation,
    ElicitationResult,
    SubagentStart,
    TeammateIdle,
    TaskCreated,
    TaskCompleted,
    InstructionsLoaded,
    ConfigChange,
    CwdChanged,
    FileChanged,
    WorktreeCreate,
    WorktreeRemove,
}

impl HookEvent {
    pub fn is_implemented(self) -> bool {
        use HookEvent::*;
        matches!(
            self,
            PreToolUse
                | PostToolUse
                | PostToolUseFailure
                | PermissionRequest
                | PermissionDenied
                | UserPromptSubmit
                | SessionStart
                | SessionEnd
                | Stop
                | SubagentStop
                | PreCompact
                | PostCompact
                | Notification
        )
    }

    /// Events whose matcher is compared against a tool name.
    pub fn is_tool_scoped(self) -> bool {
        use HookEvent::*;
        matches!(self, PreToolUse | PostToolUse | PostToolUseFailure | PermissionRequest | PermissionDenied)
    }
}

impl fmt::Display for HookEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookCommandType {
    #[default]
    Command,
}

/// One entry of the `"hooks"` list in settings.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HookConfig {
    pub event: HookEvent,
    #[serde(default)]
    pub matcher: Option<String>,
    #[serde(rename = "type", default)]
    pub command_type: HookCommandType,
    pub command: String,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookPermission {
    Deny,
    Ask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookDecision {
    Allow,
    Deny,
}

/// What a single hook may print on stdout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct HookOutput {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permission_decision: Option<HookPermission>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permission_decision_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updated_input: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub additional_context: Option<String>,
    #[serde(default, rename = "updatedMCPToolOutput", skip_serializing_if = "Option::is_none")]
    pub updated_mcp_tool_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<HookDecision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retry: Option<String>,
    #[serde(default, rename = "continue", skip_serializing_if = "Option::is_none")]
    pub continue_: Option<bool>,
}

impl HookOutput {
    pub fn context(text: impl Into<String>) -> Self {
        HookOutput {
            additional_context: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn deny(reason: impl Into<String>) -> Self {
        HookOutput {
            permission_decision: Some(HookPermission::Deny),
            permission_decision_reason: Some(reason.into()),
            ..Default::default()
        }
    }

    /// Reject fields that do not belong to `event`.
    pub fn validate_for(&self, event: HookEvent) -> std::result::Result<(), String> {
        let misplaced = |field: &str, present: bool, allowed: HookEvent| {
            if present && event != allowed {
                Err(format!("{field} is not valid for {event}"))
            } else {
                Ok(())
            }
        };
        misplaced("permissionDecision", self.permission_decision.is_some(), HookEvent::PreToolUse)?;
        misplaced("permissionDecisionReason", self.permission_decision_reason.is_some(), HookEvent::PreToolUse)?;
        misplaced("updatedInput", self.updated_input.is_some(), HookEvent::PreToolUse)?;
        misplaced("updatedMCPToolOutput", self.updated_mcp_tool_output.is_some(), HookEvent::PostToolUse)?;
        misplaced("decision", self.decision.is_some(), HookEvent::PermissionRequest)?;
        misplaced("retry", self.retry.is_some(), HookEvent::PermissionDenied)?;
        Ok(())
    }
}

/// Merged result of every matching hook for one firing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HookOutcome {
    pub permission: Option<HookPermission>,
    pub reason: Option<String>,
    pub updated_input: Option<Value>,
    pub additional_context: Option<String>,
    pub updated_mcp_tool_output: Option<String>,
    pub decision: Option<HookDecision>,
    pub retry: Option<String>,
    /// Some hook returned `"continue": false`.
    pub stop: bool,
    pub notifications: Vec<Notification>,
    pub fired: usize,
}

impl HookOutcome {
    fn merge(&mut self, out: HookOutput) {
        match (self.permission, out.permission_decision) {
            (Some(HookPermission::Deny), _) | (_, None) => {}
            (_, Some(p)) => {
                self.permission = Some(p);
                self.reason = out.permission_decision_reason.clone();
            }
        }
        if out.updated_input.is_some() {
            self.updated_input = out.updated_input;
        }
        if let Some(ctx) = out.additional_context {
            match &mut self.additional_context {
                Some(acc) => {
                    acc.push('\n');
                    acc.push_str(&ctx);
                }
                None => self.additional_context = Some(ctx),
            }
        }
        if out.updated_mcp_tool_output.is_some() {
            self.updated_mcp_tool_output = out.updated_mcp_tool_output;
        }
        match (self.decision, out.decision) {
            (Some(HookDecision::Deny), _) | (_, None) => {}
            (_, d) => self.decision = d,
        }
        if out.retry.is_some() {
            self.retry = out.retry;
        }
        if out.continue_ == Some(false) {
            self.stop = true;
        }
    }
}

/// An in-process hook.
#[async_trait]
pub trait HookCallback: Send + Sync {
    async fn call(&self, event: HookEvent, payload: &Value) -> std::result::Result<HookOutput, String>;
}

/// Adapter so plain closures can be registered.
pub struct FnHook<F>(pub F);

#[async_trait]
impl<F> HookCallback for FnHook<F>
where
    F: Fn(HookEvent, &Value) -> std::result::Result<HookOutput, String> + Send + Sync,
{
    async fn call(&self, event: HookEvent, payload: &Value) -> std::result::Result<HookOutput, String> {
        (self.0)(event, payload)
    }
}

#[derive(Clone)]
enum Runner {
    Command(String),
    Callback(Arc<dyn HookCallback>),
}

#[derive(Clone)]
struct Registration {
    event: HookEvent,
    matcher: Option<Regex>,
    runner: Runner,
    timeout: Duration,
    label: String,
}

impl Registration {
    fn matches(&self, event: HookEvent, target: Option<&str>) -> bool {
        if self.event != event {
            return false;
        }
        match (&self.matcher, target) {
            (None, _) => true,
            (Some(_), _) if !event.is_tool_scoped() => true,
            (Some(re), Some(t)) => re.is_match(t),
            (Some(_), None) => false,
        }
    }
}

/// Immutable once a turn starts; cloning is cheap.
#[derive(Clone, Default)]
pub struct HookRegistry {
    entries: Vec<Registration>,
}

impl fmt::Debug for HookRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.entries.iter().map(|r| (&r.event, &r.label))).finish()
    }
}

/// `*` or empty matches everything; otherwise an anchored regex such as `Bash|File.*`.
fn compile_matcher(pattern: Option<&str>) -> Result<Option<Regex>> {
    match pattern {
        None | Some("") | Some("*") => Ok(None),
        Some(p) => Regex::new(&format!("^(?:{p})$"))
            .map(Some)
            .map_err(|e| Error::Config(format!("bad hook matcher {p:?}: {e}"))),
    }
}

impl HookRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_configs(configs: &[HookConfig]) -> Result<Self> {
        let mut reg = HookRegistry::new();
        for c in configs {
            reg.entries.push(Registration {
                event: c.event,
                matcher: compile_matcher(c.matcher.as_deref())?,
                runner: Runner::Command(c.command.clone()),
                timeout: c.timeout_ms.map(Duration::from_millis).unwrap_or(DEFAULT_HOOK_TIMEOUT),
                label: c.command.clone(),
            });
        }
        Ok(reg)
    }

    pub fn register_command(&mut self, event: HookEvent, matcher: Option<&str>, command: &str, timeout: Duration) -> Result<()> {
        self.entries.push(Registration {
            event,
            matcher: compile_matcher(matcher)?,
            runner: Runner::Command(command.to_string()),
            timeout,
            label: command.to_string(),
        });
        Ok(())
    }

    pub fn register_callback(&mut self, event: HookEvent, matcher: Option<&str>, cb: Arc<dyn HookCallback>) -> Result<()> {
        self.entries.push(Registration {
            event,
            matcher: compile_matcher(matcher)?,
            runner: Runner::Callback(cb),
            timeout: DEFAULT_HOOK_TIMEOUT,
            label: "callback".into(),
        });
        Ok(())
    }

    pub fn with_callback<F>(mut self, event: HookEvent, matcher: Option<&str>, f: F) -> Self
    where
        F: Fn(HookEvent, &Value) -> std::result::Result<HookOutput, String> + Send + Sync + 'static,
    {
        self.register_callback(event, matcher, Arc::new(FnHook(f)))
            .expect("matcher compiles");
        self
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn has(&self, event: HookEvent, target: Option<&str>) -> bool {
        self.entries.iter().any(|r| r.matches(event, target))
    }

    /// Run every matching hook concurrently; merge in registration order.
    /// `target` is the tool name for tool-scoped events.
    pub async fn fire(&self, event: HookEvent, target: Option<&str>, payload: Value) -> HookOutcome {
        let mut outcome = HookOutcome::default();
        if !event.is_implemented() {
            return outcome;
        }
        let matching: Vec<&Registration> = self.entries.iter().filter(|r| r.matches(event, target)).collect();
        if matching.is_empty() {
            return outcome;
        }
        let mut payload = payload;
        if let Value::Object(map) = &mut payload {
            map.insert("hook_event_name".into(), Value::String(event.to_string()));
        }
        let payload = &payload;
        let results = futures::future::join_all(matching.iter().map(|r| run_one(r, event, payload))).await;
        for (reg, res) in matching.iter().zip(results) {
            outcome.fired += 1;
            match res.and_then(|o| o.validate_for(event).map(|_| o)) {
                Ok(out) => outcome.merge(out),
                Err(msg) => outcome
                    .notifications
                    .push(Notification::new("hook", format!("{event} hook `{}` ignored: {msg}", reg.label))),
            }
        }
        outcome
    }
}

async fn run_one(reg: &Registration, event: HookEvent, payload: &Value) -> std::result::Result<HookOutput, String> {
    let fut = async {
        match &reg.runner {
            Runner::Callback(cb) => cb.call(event, payload).await,
            Runner::Command(cmd) => run_command_hook(cmd, payload).await,
        }
    };
    match tokio::time::timeout(reg.timeout, fut).await {
        Ok(r) => r,
        Err(_) => Err(format!("timed out after {} ms", reg.timeout.as_millis())),
    }
}

/// Payload as one JSON document on stdin; stdout parsed as [`HookOutput`].
/// Empty stdout is neutral.
pub async fn run_command_hook(command: &str, payload: &Value) -> std::result::Result<HookOutput, String> {
    let mut cmd = Command::new("sh");
    cmd.arg("-c")
        .arg(command)
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .kill_on_drop(true);
    if let Some(cwd) = payload.get("cwd").and_then(Value::as_str) {
        if std::path::Path::new(cwd).is_dir() {
            cmd.current_dir(cwd);
        }
    }
    let mut child = cmd.spawn().map_err(|e| format!("spawn failed: {e}"))?;
    if let Some(mut stdin) = child.stdin.take() {
        let body = serde_json::to_vec(payload).map_err(|e| e.to_string())?;
        // A hook that never reads stdin closes the pipe; that is not an error.
        let _ = stdin.write_all(&body).await;
    }
    let out = child.wait_with_output().await.map_err(|e| e.to_string())?;
    if !out.status.success() {
        let stderr = String::from_utf8_lossy(&out.stderr);
        return Err(format!("exit {}: {}", out.status.code().unwrap_or(-1), stderr.trim()));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    if text.trim().is_empty() {
        return Ok(HookOutput::default());
    }
    serde_json::from_str(text.trim()).map_err(|e| format!("malformed output: {e}"))
}

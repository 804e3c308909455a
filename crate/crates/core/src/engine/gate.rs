//! Per-request authorization: PreToolUse hooks, rule evaluation, then the
//! PermissionRequest hook and the ask resolver for anything still undecided.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{EventBus, LoopEvent};
use crate::hooks::{HookDecision, HookEvent, HookPermission, HookRegistry};
use crate::permissions::{
    target_path, Classifier, Decision, Effect, Evaluator, Layer, PermissionMode, PermissionRule, RuleSource,
    Specifier, Verdict, PATH_TOOLS,
};
use crate::tools::{ToolOutcome, ToolRequest};
use crate::types::{new_id, Message, Notification};

/// An ask surfaced to whoever answers permission prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermissionRequest {
    pub id: String,
    pub session_id: String,
    pub tool_use_id: String,
    pub tool_name: String,
    pub input: Value,
    pub reason: String,
    /// Set when the request bubbled up from a subagent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AskAnswer {
    Allow,
    /// Allow and add a session-scoped allow rule.
    AllowAlways,
    Deny,
    /// Deny and abort the turn.
    Abort,
}

#[async_trait]
pub trait AskResolver: Send + Sync {
    async fn resolve(&self, req: &PermissionRequest) -> AskAnswer;
}

/// Answers every ask the same way (headless `--on-ask`).
pub struct StaticResolver(pub AskAnswer);

#[async_trait]
impl AskResolver for StaticResolver {
    async fn resolve(&self, _req: &PermissionRequest) -> AskAnswer {
        self.0
    }
}

/// Pops scripted answers, then falls back to a fixed one. Records every request.
pub struct QueueResolver {
    answers: Mutex<VecDeque<AskAnswer>>,
    fallback: AskAnswer,
    seen: Mutex<Vec<PermissionRequest>>,
}

impl QueueResolver {
    pub fn new(answers: impl IntoIterator<Item = AskAnswer>, fallback: AskAnswer) -> Self {
        QueueResolver {
            answers: Mutex::new(answers.into_iter().collect()),
            fallback,
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<PermissionRequest> {
        self.seen.lock().unwrap().clone()
    }
}

#[async_trait]
impl AskResolver for QueueResolver {
    async fn resolve(&self, req: &PermissionRequest) -> AskAnswer {
        self.seen.lock().unwrap().push(req.clone());
        self.answers.lock().unwrap().pop_front().unwrap_or(self.fallback)
    }
}

/// The allow rule recorded by "always allow": the exact command for Bash,
/// the exact path for path tools, otherwise the whole tool.
pub fn session_allow_rule(req: &ToolRequest) -> PermissionRule {
    let specifier = if req.tool_name == "Bash" {
        req.input.get("command").and_then(Value::as_str).map(|c| Specifier::Exact(c.to_string()))
    } else if PATH_TOOLS.contains(&req.tool_name.as_str()) {
        target_path(req).map(Specifier::Glob)
    } else {
        None
    };
    PermissionRule {
        effect: Effect::Allow,
        tool: req.tool_name.clone(),
        specifier,
        source: RuleSource::Session,
        bypass_immune: false,
    }
}

pub(crate) struct GateInput<'a> {
    pub hooks: &'a HookRegistry,
    pub classifier: &'a dyn Classifier,
    pub resolver: &'a dyn AskResolver,
    pub events: &'a EventBus,
    pub project_dir: &'a Path,
    pub session_id: &'a str,
    pub mode: PermissionMode,
    pub rules: &'a [PermissionRule],
    pub transcript: &'a [Message],
    pub hook_payload: &'a Value,
    pub agent: Option<&'a str>,
}

#[derive(Debug)]
pub(crate) struct GateOutcome {
    /// `Ok` carries the request to execute (input possibly rewritten by a hook).
    pub result: Result<ToolRequest, ToolOutcome>,
    pub decision: Decision,
    pub session_allow: Option<PermissionRule>,
    pub input_rewritten: bool,
    pub abort: bool,
    pub notifications: Vec<Notification>,
}

fn payload(base: &Value, req: &ToolRequest, extra: Value) -> Value {
    let mut p = base.clone();
    if let Value::Object(o) = &mut p {
        o.insert("tool_name".into(), Value::String(req.tool_name.clone()));
        o.insert("tool_input".into(), req.input.clone());
        o.insert("tool_use_id".into(), Value::String(req.tool_use_id.clone()));
        if let Value::Object(e) = extra {
            o.extend(e);
        }
    }
    p
}

pub(crate) async fn gate(inp: &GateInput<'_>, mut req: ToolRequest) -> GateOutcome {
    let mut notes = Vec::new();
    let mut input_rewritten = false;

    let pre = inp
        .hooks
        .fire(HookEvent::PreToolUse, Some(&req.tool_name), payload(inp.hook_payload, &req, json!({})))
        .await;
    notes.extend(pre.notifications);
    if let Some(updated) = pre.updated_input {
        if updated != req.input {
            req.input = updated;
            input_rewritten = true;
        }
    }

    let decision = if pre.permission == Some(HookPermission::Deny) {
        Decision::deny(Layer::Hook, pre.reason.clone().unwrap_or_else(|| "denied by PreToolUse hook".into()))
    } else {
        let evaluated = Evaluator::new(inp.project_dir, inp.classifier)
            .with_transcript(inp.transcript)
            .evaluate(inp.rules, inp.mode, &req);
        match evaluated {
            Ok(d) if pre.permission == Some(HookPermission::Ask) && d.verdict == Verdict::Allow => Decision::ask(
                Layer::Hook,
                pre.reason.clone().unwrap_or_else(|| "PreToolUse hook requested approval".into()),
            ),
            Ok(d) => d,
            // Bubble escalations go to the same resolver the parent uses.
            Err(esc) => Decision::ask(Layer::Mode, esc.reason),
        }
    };

    let mut out = GateOutcome {
        result: Ok(req.clone()),
        decision: decision.clone(),
        session_allow: None,
        input_rewritten,
        abort: false,
        notifications: Vec::new(),
    };

    match decision.verdict {
        Verdict::Allow => {}
        Verdict::Deny => {
            let code = if decision.layer == Layer::Hook { "hook_denied" } else { "permission_denied" };
            out.result = Err(denied(inp, &req, &decision.reason, code, &mut notes).await);
        }
        Verdict::Ask => {
            let hook = inp
                .hooks
                .fire(
                    HookEvent::PermissionRequest,
                    Some(&req.tool_name),
                    payload(inp.hook_payload, &req, json!({"reason": decision.reason})),
                )
                .await;
            notes.extend(hook.notifications);
            let answer = match hook.decision {
                Some(HookDecision::Allow) => AskAnswer::Allow,
                Some(HookDecision::Deny) => AskAnswer::Deny,
                None => {
                    let pr = PermissionRequest {
                        id: new_id(),
                        session_id: inp.session_id.to_string(),
                        tool_use_id: req.tool_use_id.clone(),
                        tool_name: req.tool_name.clone(),
                        input: req.input.clone(),
                        reason: decision.reason.clone(),
                        agent: inp.agent.map(str::to_string),
                    };
                    inp.events.emit(LoopEvent::PermissionRequest(pr.clone()));
                    let n = inp
                        .hooks
                        .fire(
                            HookEvent::Notification,
                            None,
                            payload(inp.hook_payload, &req, json!({"message": format!("permission needed for {}", req.tool_name)})),
                        )
                        .await;
                    notes.extend(n.notifications);
                    inp.resolver.resolve(&pr).await
                }
            };
            match answer {
                AskAnswer::Allow => {
                    out.decision = Decision::allow(Layer::Mode, "approved");
                }
                AskAnswer::AllowAlways => {
                    out.decision = Decision::allow(Layer::Mode, "approved for this session");
                    out.session_allow = Some(session_allow_rule(&req));
                }
                AskAnswer::Deny | AskAnswer::Abort => {
                    out.abort = answer == AskAnswer::Abort;
                    out.decision = Decision::deny(Layer::Mode, "the user denied this request");
                    out.result = Err(denied(inp, &req, "the user denied this request", "user_denied", &mut notes).await);
                }
            }
        }
    }
    out.notifications = notes;
    out
}

async fn denied(
    inp: &GateInput<'_>,
    req: &ToolRequest,
    reason: &str,
    code: &str,
    notes: &mut Vec<Notification>,
) -> ToolOutcome {
    let hook = inp
        .hooks
        .fire(
            HookEvent::PermissionDenied,
            Some(&req.tool_name),
            payload(inp.hook_payload, req, json!({"reason": reason})),
        )
        .await;
    notes.extend(hook.notifications);
    let mut text = format!("Permission denied: {reason}");
    if let Some(hint) = hook.retry {
        text.push_str(&format!("\n{hint}"));
    }
    ToolOutcome::error(&req.tool_use_id, text).with_reason(code)
}

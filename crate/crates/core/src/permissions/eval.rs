use std::path::{Component, Path, PathBuf};

use serde_json::Value;

use super::{
    matches_rule, Classifier, Decision, Effect, HeuristicClassifier, Layer, PermissionMode, PermissionRule,
    Verdict,
};
use crate::tools::ToolRequest;
use crate::types::Message;

pub const READ_ONLY_TOOLS: &[&str] = &["FileRead", "Glob", "Grep"];

/// Filesystem commands acceptEdits lets through without a prompt.
pub const ACCEPT_EDITS_COMMANDS: &[&str] = &["mkdir", "rmdir", "touch", "rm", "mv", "cp", "sed"];

/// Returned instead of a verdict in bubble mode; the caller forwards it upward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Escalation {
    pub request: ToolRequest,
    pub reason: String,
}

pub struct Evaluator<'a> {
    pub project_dir: &'a Path,
    pub classifier: &'a dyn Classifier,
    pub transcript: &'a [Message],
    pub read_only_tools: &'a [&'a str],
}

impl<'a> Evaluator<'a> {
    pub fn new(project_dir: &'a Path, classifier: &'a dyn Classifier) -> Self {
        Evaluator {
            project_dir,
            classifier,
            transcript: &[],
            read_only_tools: READ_ONLY_TOOLS,
        }
    }

    pub fn with_transcript(mut self, transcript: &'a [Message]) -> Self {
        self.transcript = transcript;
        self
    }

    pub fn evaluate(
        &self,
        rules: &[PermissionRule],
        mode: PermissionMode,
        req: &ToolRequest,
    ) -> Result<Decision, Escalation> {
        // The whole command is checked for denies before segments are split off,
        // so a deny rule that matches the full text is never missed.
        if let Some(rule) = first_match(rules, Effect::Deny, req) {
            return Ok(deny_by(rule));
        }
        let segments = if req.tool_name == "Bash" {
            let cmd = req.input.get("command").and_then(Value::as_str).unwrap_or_default();
            split_command(cmd)
        } else {
            Vec::new()
        };
        if segments.len() <= 1 {
            return self.evaluate_single(rules, mode, req);
        }
        let mut results = Vec::with_capacity(segments.len());
        for segment in segments {
            let mut sub = req.clone();
            if let Some(obj) = sub.input.as_object_mut() {
                obj.insert("command".into(), Value::String(segment));
            }
            results.push(self.evaluate_single(rules, mode, &sub));
        }
        strictest(results)
    }

    fn evaluate_single(
        &self,
        rules: &[PermissionRule],
        mode: PermissionMode,
        req: &ToolRequest,
    ) -> Result<Decision, Escalation> {
        if let Some(rule) = first_match(rules, Effect::Deny, req) {
            return Ok(deny_by(rule));
        }
        let ask = rules.iter().find(|r| {
            r.effect == Effect::Ask
                && (mode != PermissionMode::BypassPermissions || r.bypass_immune)
                && matches_rule(r, req)
        });
        if let Some(rule) = ask {
            if mode == PermissionMode::Bubble {
                return Err(Escalation {
                    request: req.clone(),
                    reason: format!("ask rule {rule}"),
                });
            }
            return Ok(Decision::ask(Layer::Rule, format!("ask rule {rule} ({:?})", rule.source)));
        }
        if let Some(rule) = first_match(rules, Effect::Allow, req) {
            return Ok(Decision::allow(Layer::Rule, format!("allowed by {rule} ({:?})", rule.source)));
        }
        self.mode_default(mode, req)
    }

    pub fn mode_default(&self, mode: PermissionMode, req: &ToolRequest) -> Result<Decision, Escalation> {
        let read_only = self.read_only_tools.contains(&req.tool_name.as_str());
        let decision = match mode {
            PermissionMode::Plan if read_only => Decision::allow(Layer::Mode, "plan mode permits read-only tools"),
            PermissionMode::Plan => Decision::deny(
                Layer::Mode,
                format!("plan-unapproved: {} is not read-only and the plan has not been approved", req.tool_name),
            ),
            PermissionMode::Default => Decision::ask(Layer::Mode, "default mode requires approval"),
            PermissionMode::AcceptEdits => {
                if self.accept_edits_allows(req) {
                    Decision::allow(Layer::Mode, "acceptEdits permits this edit")
                } else {
                    Decision::ask(Layer::Mode, "acceptEdits requires approval outside project edits")
                }
            }
            PermissionMode::Auto => match self.classifier.classify(req, self.transcript) {
                Ok(d) => d,
                Err(e) => Decision::ask(Layer::Classifier, format!("classifier unavailable: {e}")),
            },
            PermissionMode::DontAsk => Decision::allow(Layer::Mode, "dontAsk mode"),
            PermissionMode::BypassPermissions => Decision::allow(Layer::Mode, "bypassPermissions mode"),
            PermissionMode::Bubble => {
                return Err(Escalation {
                    request: req.clone(),
                    reason: "bubble mode escalates to the parent".into(),
                })
            }
        };
        Ok(decision)
    }

    fn accept_edits_allows(&self, req: &ToolRequest) -> bool {
        match req.tool_name.as_str() {
            "FileEdit" | "FileWrite" => super::target_path(req)
                .is_some_and(|p| is_within(self.project_dir, &resolve(self.project_dir, Path::new(&p)))),
            "Bash" => req
                .input
                .get("command")
                .and_then(Value::as_str)
                .and_then(|c| c.split_whitespace().next())
                .is_some_and(|first| ACCEPT_EDITS_COMMANDS.contains(&first)),
            _ => false,
        }
    }
}

/// Convenience entry point using the heuristic classifier and no transcript.
pub fn evaluate(
    rules: &[PermissionRule],
    mode: PermissionMode,
    req: &ToolRequest,
    project_dir: &Path,
) -> Result<Decision, Escalation> {
    let classifier = HeuristicClassifier::default();
    Evaluator::new(project_dir, &classifier).evaluate(rules, mode, req)
}

fn first_match<'r>(rules: &'r [PermissionRule], effect: Effect, req: &ToolRequest) -> Option<&'r PermissionRule> {
    rules.iter().find(|r| r.effect == effect && matches_rule(r, req))
}

fn deny_by(rule: &PermissionRule) -> Decision {
    Decision::deny(Layer::Rule, format!("denied by rule {rule} ({:?})", rule.source))
}

/// Deny beats escalation beats ask beats allow.
pub fn strictest(results: Vec<Result<Decision, Escalation>>) -> Result<Decision, Escalation> {
    let mut best: Option<Result<Decision, Escalation>> = None;
    let rank = |r: &Result<Decision, Escalation>| match r {
        Ok(d) if d.verdict == Verdict::Deny => 0,
        Err(_) => 1,
        Ok(d) if d.verdict == Verdict::Ask => 2,
        Ok(_) => 3,
    };
    for r in results {
        if best.as_ref().map_or(true, |b| rank(&r) < rank(b)) {
            best = Some(r);
        }
    }
    best.unwrap_or_else(|| Ok(Decision::allow(Layer::Rule, "empty command")))
}

/// Split a shell command on `&&`, `||`, `;`, `|` and newlines outside quotes.
pub fn split_command(cmd: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quote: Option<char> = None;
    let mut chars = cmd.chars().peekable();
    while let Some(c) = chars.next() {
        if let Some(q) = quote {
            cur.push(c);
            if c == q {
                quote = None;
            } else if c == '\\' && q == '"' {
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            }
            continue;
        }
        match c {
            '\'' | '"' => {
                quote = Some(c);
                cur.push(c);
            }
            '\\' => {
                cur.push(c);
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            }
            ';' | '\n' => flush(&mut out, &mut cur),
            '&' if chars.peek() == Some(&'&') => {
                chars.next();
                flush(&mut out, &mut cur);
            }
            '|' => {
                if chars.peek() == Some(&'|') {
                    chars.next();
                }
                flush(&mut out, &mut cur);
            }
            _ => cur.push(c),
        }
    }
    flush(&mut out, &mut cur);
    out
}

fn flush(out: &mut Vec<String>, cur: &mut String) {
    let t = cur.trim();
    if !t.is_empty() {
        out.push(t.to_string());
    }
    cur.clear();
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let mut out = PathBuf::new();
    for comp in joined.components() {
        match comp {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

fn is_within(root: &Path, p: &Path) -> bool {
    p.starts_with(resolve(root, Path::new("")))
}

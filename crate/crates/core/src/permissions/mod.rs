//! Deny-first authorization.
//!
//! Rules come from several sources (managed policy, settings files, CLI flags,
//! session grants, agent definitions) and are merged into one list. A request
//! is checked against every rule: any matching deny wins, then ask, then allow.
//! When nothing matches, the session's [`PermissionMode`] supplies the verdict.

mod classifier;
mod eval;
mod sandbox;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tools::{ToolRequest, ToolSpec};

pub use classifier::{Classifier, ClassifierError, DangerousPattern, HeuristicClassifier, DANGEROUS_PATTERNS};
pub use eval::{
    evaluate, split_command, strictest, Escalation, Evaluator, ACCEPT_EDITS_COMMANDS, READ_ONLY_TOOLS,
};
pub use sandbox::{should_use_sandbox, SandboxConfig};

/// Tools whose specifier is a glob over the target path.
pub const PATH_TOOLS: &[&str] = &["FileRead", "FileEdit", "FileWrite", "Glob", "Grep"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Effect {
    Allow,
    Deny,
    Ask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleSource {
    Managed,
    Settings,
    Session,
    Cli,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Specifier {
    /// Leading whitespace tokens of the command.
    Prefix(String),
    Exact(String),
    /// Glob over the target path of a path tool.
    Glob(String),
    /// Every tool exported by one MCP server.
    McpServer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PermissionRule {
    pub effect: Effect,
    pub tool: String,
    pub specifier: Option<Specifier>,
    pub source: RuleSource,
    pub bypass_immune: bool,
}

impl PermissionRule {
    /// Rules without a content-level specifier (tool-wide or server-wide).
    pub fn is_blanket(&self) -> bool {
        matches!(self.specifier, None | Some(Specifier::McpServer(_)))
    }
}

impl fmt::Display for PermissionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.specifier {
            None | Some(Specifier::McpServer(_)) => write!(f, "{}", self.tool),
            Some(Specifier::Prefix(p)) => write!(f, "{}(prefix:{})", self.tool, p),
            Some(Specifier::Exact(v)) | Some(Specifier::Glob(v)) => write!(f, "{}({})", self.tool, v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message} at position {position} in {text:?}")]
pub struct RuleParseError {
    pub text: String,
    pub position: usize,
    pub message: String,
}

fn parse_error(text: &str, position: usize, message: &str) -> RuleParseError {
    RuleParseError {
        text: text.to_string(),
        position,
        message: message.to_string(),
    }
}

/// Parse `name` or `name(spec)`.
pub fn parse_rule(text: &str, effect: Effect, source: RuleSource) -> Result<PermissionRule, RuleParseError> {
    let trimmed = text.trim();
    let offset = text.len() - text.trim_start().len();
    if trimmed.is_empty() {
        return Err(parse_error(text, 0, "empty rule"));
    }
    let (name, spec) = match trimmed.find('(') {
        None => {
            if let Some(pos) = trimmed.find(')') {
                return Err(parse_error(text, offset + pos, "unbalanced ')'"));
            }
            (trimmed, None)
        }
        Some(open) => {
            let mut depth = 0usize;
            let mut close = None;
            for (i, c) in trimmed.char_indices().skip_while(|(i, _)| *i < open) {
                match c {
                    '(' => depth += 1,
                    ')' => {
                        depth -= 1;
                        if depth == 0 {
                            close = Some(i);
                            break;
                        }
                    }
                    _ => {}
                }
            }
            let close = close.ok_or_else(|| parse_error(text, offset + open, "unbalanced '('"))?;
            if close + 1 != trimmed.len() {
                return Err(parse_error(text, offset + close + 1, "trailing characters after ')'"));
            }
            let spec = &trimmed[open + 1..close];
            if spec.trim().is_empty() {
                return Err(parse_error(text, offset + open + 1, "empty specifier"));
            }
            (&trimmed[..open], Some(spec))
        }
    };
    if name.is_empty() {
        return Err(parse_error(text, offset, "missing tool name"));
    }
    if let Some(pos) = name.find(|c: char| c.is_whitespace()) {
        return Err(parse_error(text, offset + pos, "whitespace in tool name"));
    }

    let specifier = match spec {
        None => mcp_server_of(name).map(|s| Specifier::McpServer(s.to_string())),
        Some(spec) => {
            if let Some(prefix) = spec.strip_prefix("prefix:") {
                let prefix = prefix.trim();
                if prefix.is_empty() {
                    return Err(parse_error(text, offset + name.len() + 8, "empty prefix"));
                }
                Some(Specifier::Prefix(prefix.to_string()))
            } else if PATH_TOOLS.contains(&name) {
                globset::Glob::new(spec)
                    .map_err(|e| parse_error(text, offset + name.len() + 1, &format!("invalid glob: {e}")))?;
                Some(Specifier::Glob(spec.to_string()))
            } else {
                Some(Specifier::Exact(spec.to_string()))
            }
        }
    };
    Ok(PermissionRule {
        effect,
        tool: name.to_string(),
        specifier,
        source,
        bypass_immune: source == RuleSource::Managed,
    })
}

/// `mcp__db` and `mcp__db__*` name a whole server; `mcp__db__query` names a tool.
fn mcp_server_of(name: &str) -> Option<&str> {
    let rest = name.strip_prefix("mcp__")?;
    if rest.is_empty() {
        return None;
    }
    match rest.split_once("__") {
        None => Some(rest),
        Some((server, "*")) if !server.is_empty() => Some(server),
        Some(_) => None,
    }
}

/// Split a comma/space separated rule list (`--allowedTools "Bash(prefix:npm test),FileRead"`),
/// keeping parenthesized specifiers intact.
pub fn split_rule_list(list: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut depth = 0usize;
    for c in list.chars() {
        match c {
            '(' => {
                depth += 1;
                cur.push(c);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                cur.push(c);
            }
            ',' | ' ' | '\t' | '\n' if depth == 0 => {
                if !cur.trim().is_empty() {
                    out.push(cur.trim().to_string());
                }
                cur.clear();
            }
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

pub fn parse_rules<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    effect: Effect,
    source: RuleSource,
) -> Result<Vec<PermissionRule>, RuleParseError> {
    texts.into_iter().map(|t| parse_rule(t, effect, source)).collect()
}

/// The content a non-path specifier is compared with.
pub fn primary_content(req: &ToolRequest) -> String {
    let field = match req.tool_name.as_str() {
        "Bash" => "command",
        "Agent" => "subagent_type",
        "Skill" => "skill",
        _ => "",
    };
    if !field.is_empty() {
        if let Some(s) = req.input.get(field).and_then(|v| v.as_str()) {
            return s.to_string();
        }
    }
    match &req.input {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Null => String::new(),
        other => other.to_string(),
    }
}

/// The path a path tool targets.
pub fn target_path(req: &ToolRequest) -> Option<String> {
    req.input
        .get("path")
        .or_else(|| req.input.get("file_path"))
        .and_then(|v| v.as_str())
        .map(str::to_string)
}

fn tokens_start_with(content: &str, prefix: &str) -> bool {
    let mut have = content.split_whitespace();
    prefix.split_whitespace().all(|want| have.next() == Some(want))
}

fn glob_matches(pattern: &str, path: &str) -> bool {
    let Ok(glob) = globset::GlobBuilder::new(pattern).literal_separator(true).build() else {
        return false;
    };
    let matcher = glob.compile_matcher();
    let stripped = path.strip_prefix("./").unwrap_or(path);
    matcher.is_match(path) || matcher.is_match(stripped)
}

/// Same matcher for runtime evaluation and pool prefiltering.
pub fn matches_rule(rule: &PermissionRule, req: &ToolRequest) -> bool {
    match &rule.specifier {
        None => rule.tool == req.tool_name,
        Some(Specifier::McpServer(server)) => req
            .tool_name
            .strip_prefix("mcp__")
            .and_then(|rest| rest.strip_prefix(server.as_str()))
            .is_some_and(|rest| rest.starts_with("__")),
        Some(_) if rule.tool != req.tool_name => false,
        Some(Specifier::Prefix(prefix)) => tokens_start_with(&primary_content(req), prefix),
        Some(Specifier::Exact(value)) => primary_content(req) == *value,
        Some(Specifier::Glob(pattern)) => target_path(req).is_some_and(|p| glob_matches(pattern, &p)),
    }
}

/// Remove every tool a blanket deny rule matches, before the model sees the pool.
pub fn prefilter_tools(pool: Vec<ToolSpec>, rules: &[PermissionRule]) -> Vec<ToolSpec> {
    pool.into_iter()
        .filter(|spec| !is_blanket_denied(&spec.name, rules))
        .collect()
}

pub fn is_blanket_denied(tool_name: &str, rules: &[PermissionRule]) -> bool {
    let probe = ToolRequest::new("", tool_name, serde_json::Value::Null);
    rules
        .iter()
        .any(|r| r.effect == Effect::Deny && r.is_blanket() && matches_rule(r, &probe))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PermissionMode {
    #[serde(rename = "plan")]
    Plan,
    #[serde(rename = "default")]
    Default,
    #[serde(rename = "acceptEdits")]
    AcceptEdits,
    #[serde(rename = "auto")]
    Auto,
    #[serde(rename = "dontAsk")]
    DontAsk,
    #[serde(rename = "bypassPermissions")]
    BypassPermissions,
    /// Subagent-only: unresolved requests escalate to the parent.
    #[serde(rename = "bubble")]
    Bubble,
}

impl PermissionMode {
    pub const ALL: [PermissionMode; 7] = [
        PermissionMode::Plan,
        PermissionMode::Default,
        PermissionMode::AcceptEdits,
        PermissionMode::Auto,
        PermissionMode::DontAsk,
        PermissionMode::BypassPermissions,
        PermissionMode::Bubble,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PermissionMode::Plan => "plan",
            PermissionMode::Default => "default",
            PermissionMode::AcceptEdits => "acceptEdits",
            PermissionMode::Auto => "auto",
            PermissionMode::DontAsk => "dontAsk",
            PermissionMode::BypassPermissions => "bypassPermissions",
            PermissionMode::Bubble => "bubble",
        }
    }
}

impl fmt::Display for PermissionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PermissionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PermissionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown permission mode {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Deny,
    Ask,
    Allow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Rule,
    Mode,
    Classifier,
    Hook,
    Prefilter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub reason: String,
    pub layer: Layer,
}

impl Decision {
    pub fn allow(layer: Layer, reason: impl Into<String>) -> Self {
        Decision {
            verdict: Verdict::Allow,
            reason: reason.into(),
            layer,
        }
    }

    pub fn ask(layer: Layer, reason: impl Into<String>) -> Self {
        Decision {
            verdict: Verdict::Ask,
            reason: reason.into(),
            layer,
        }
    }

    /// Deny decisions always carry a reason; an empty one is replaced.
    pub fn deny(layer: Layer, reason: impl Into<String>) -> Self {
        let mut reason = reason.into();
        if reason.trim().is_empty() {
            reason = format!("denied by {layer:?} layer");
        }
        Decision {
            verdict: Verdict::Deny,
            reason,
            layer,
        }
    }
}

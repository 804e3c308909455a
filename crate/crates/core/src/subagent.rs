//! The Agent tool: definitions, permission override, tool scoping and the
//! nested sidechain run.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio_util::sync::CancellationToken;

use crate::engine::{run_turn, EventBus, Harness, LoopEvent, Session, StopReason};
use crate::error::{Error, Result};
use crate::hooks::HookEvent;
use crate::permissions::{parse_rule, Effect, PermissionMode, PermissionRule, RuleSource};
use crate::tools::skills::{parse_frontmatter, StringOrList};
use crate::tools::{AgentDelegate, ToolContext, ToolOutcome, ToolPool, ToolRequest};
use crate::types::{Message, Notification};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentSource {
    Builtin,
    User,
    Project,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDefinition {
    pub name: String,
    pub description: String,
    pub system_prompt: String,
    /// Allowlist of tool rules; `None` inherits the parent's.
    pub tools: Option<Vec<String>>,
    pub disallowed_tools: Vec<String>,
    pub model: Option<String>,
    pub permission_mode: Option<PermissionMode>,
    pub max_turns: Option<u32>,
    pub source: AgentSource,
}

impl AgentDefinition {
    fn builtin(name: &str, description: &str, system_prompt: &str) -> Self {
        AgentDefinition {
            name: name.into(),
            description: description.into(),
            system_prompt: system_prompt.into(),
            tools: None,
            disallowed_tools: Vec::new(),
            model: None,
            permission_mode: None,
            max_turns: None,
            source: AgentSource::Builtin,
        }
    }
}

/// Explore, Plan and general-purpose.
pub fn builtin_agents() -> Vec<AgentDefinition> {
    let mut explore = AgentDefinition::builtin(
        "Explore",
        "Read-only search of the codebase. Cannot modify files.",
        "You are a read-only exploration agent. Search and read files, then report what you found concisely.",
    );
    explore.disallowed_tools = vec!["FileWrite".into(), "FileEdit".into()];
    let mut plan = AgentDefinition::builtin(
        "Plan",
        "Designs an implementation plan without changing code.",
        "You are a planning agent. Investigate the code and produce a step-by-step plan. Do not modify files.",
    );
    plan.disallowed_tools = vec!["FileWrite".into(), "FileEdit".into()];
    plan.permission_mode = Some(PermissionMode::Plan);
    let general = AgentDefinition::builtin(
        "general-purpose",
        "General agent for multi-step tasks.",
        "You are a general-purpose coding agent. Complete the task and reply with a short summary of what you did.",
    );
    vec![explore, plan, general]
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct AgentFrontmatter {
    name: Option<String>,
    description: String,
    tools: Option<StringOrList>,
    disallowed_tools: Option<StringOrList>,
    model: Option<String>,
    permission_mode: Option<String>,
    max_turns: Option<u32>,
}

/// Built-ins plus `<dir>/*.md` from each `(dir, source)`. Later definitions
/// with the same name replace earlier ones.
pub fn load_agent_definitions(dirs: &[(PathBuf, AgentSource)]) -> (Vec<AgentDefinition>, Vec<Notification>) {
    let mut defs = builtin_agents();
    let mut notes = Vec::new();
    for (dir, source) in dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .into_iter()
            .flatten()
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "md"))
            .collect();
        files.sort();
        for path in files {
            match parse_agent_file(&path, *source) {
                Ok(def) => {
                    defs.retain(|d| d.name != def.name);
                    defs.push(def);
                }
                Err(e) => notes.push(Notification::new("agents", format!("skipped {}: {e}", path.display()))),
            }
        }
    }
    (defs, notes)
}

fn parse_agent_file(path: &Path, source: AgentSource) -> std::result::Result<AgentDefinition, String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let (fm, body): (AgentFrontmatter, String) = parse_frontmatter(&text)?;
    let permission_mode = fm.permission_mode.map(|m| m.parse::<PermissionMode>()).transpose()?;
    let name = fm
        .name
        .or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .ok_or("no name")?;
    Ok(AgentDefinition {
        name,
        description: fm.description,
        system_prompt: body,
        tools: fm.tools.map(StringOrList::into_vec),
        disallowed_tools: fm.disallowed_tools.map(StringOrList::into_vec).unwrap_or_default(),
        model: fm.model,
        permission_mode,
        max_turns: fm.max_turns,
        source,
    })
}

/// Parent modes that already grant more autonomy win over the agent's own.
pub fn resolve_permission_override(parent: PermissionMode, agent: Option<PermissionMode>) -> PermissionMode {
    match agent {
        None => parent,
        Some(_)
            if matches!(
                parent,
                PermissionMode::BypassPermissions | PermissionMode::AcceptEdits | PermissionMode::Auto
            ) =>
        {
            parent
        }
        Some(a) => a,
    }
}

/// SDK rules always stay. An allowlist replaces the parent's session rules.
pub fn scope_tools(
    sdk_rules: &[PermissionRule],
    parent_session_rules: &[PermissionRule],
    allowlist: Option<&[String]>,
) -> Result<Vec<PermissionRule>> {
    let mut out = sdk_rules.to_vec();
    match allowlist {
        Some(list) => {
            for r in list {
                out.push(parse_rule(r, Effect::Allow, RuleSource::Session)?);
            }
        }
        None => out.extend(parent_session_rules.iter().cloned()),
    }
    Ok(out)
}

fn rule_tool_name(rule: &str) -> &str {
    rule.split('(').next().unwrap_or(rule).trim()
}

/// The parent pool narrowed to the allowlist and without disallowed tools.
pub fn scope_pool(pool: &ToolPool, def: &AgentDefinition) -> ToolPool {
    pool.retain(|s| {
        let allowed = def
            .tools
            .as_ref()
            .is_none_or(|list| list.iter().any(|r| rule_tool_name(r) == s.name));
        allowed && !def.disallowed_tools.iter().any(|d| rule_tool_name(d) == s.name)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    InProcess,
    Worktree,
    /// Reserved; always rejected.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SidechainRecord {
    pub transcript_path: PathBuf,
    pub meta_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidechainMeta {
    pub agent_id: String,
    pub agent_type: String,
    pub parent_session: String,
    pub started_at: DateTime<Utc>,
    pub ended_at: Option<DateTime<Utc>>,
    pub turn_count: u32,
    pub outcome: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentRun {
    pub agent_id: String,
    pub summary_text: String,
    pub reason: StopReason,
    pub error: Option<String>,
    pub sidechain: SidechainRecord,
    /// The child conversation as it stood when the run ended.
    pub messages: Vec<Message>,
}

/// What a child needs from the session that spawned it.
#[derive(Clone)]
pub struct ParentLink {
    pub session_id: String,
    pub transcript_dir: PathBuf,
    pub project_dir: PathBuf,
    pub mode: PermissionMode,
    pub base_rules: Vec<PermissionRule>,
    pub session_rules: Vec<PermissionRule>,
    pub depth: u32,
    pub model_id: String,
    pub events: EventBus,
    pub ask_events: EventBus,
    pub pool: ToolPool,
    counter: Arc<AtomicU32>,
    background: Arc<Mutex<Vec<Message>>>,
    background_tasks: Arc<Mutex<Vec<tokio::task::JoinHandle<()>>>>,
}

impl ParentLink {
    pub fn of(s: &Session, turn_rules: &[PermissionRule]) -> ParentLink {
        let mut session_rules = s.session_rules.clone();
        session_rules.extend(turn_rules.iter().cloned());
        let path = s.transcript_path();
        ParentLink {
            session_id: s.session_id().to_string(),
            transcript_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            project_dir: s.project_dir().to_path_buf(),
            mode: s.mode(),
            base_rules: s.base_rules.clone(),
            session_rules,
            depth: s.depth,
            model_id: s.model_id.clone(),
            events: s.events.clone(),
            ask_events: s.ask_events.clone().unwrap_or_else(|| s.events.clone()),
            pool: s.pool.clone(),
            counter: s.agent_counter.clone(),
            background: s.background.clone(),
            background_tasks: s.background_tasks.clone(),
        }
    }

    fn next_agent_id(&self) -> String {
        loop {
            let n = self.counter.fetch_add(1, Ordering::SeqCst) + 1;
            let id = format!("{}-agent-{n}", self.session_id);
            if !self.transcript_dir.join(format!("{id}.jsonl")).exists() {
                return id;
            }
        }
    }
}

struct Worktree {
    repo: PathBuf,
    path: PathBuf,
    _dir: tempfile::TempDir,
}

impl Worktree {
    fn add(repo: &Path) -> Result<Worktree> {
        let dir = tempfile::Builder::new()
            .prefix("harnesskit-wt-")
            .tempdir()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let path = dir.path().join("tree");
        let out = Command::new("git")
            .arg("-C")
            .arg(repo)
            .args(["worktree", "add", "--detach"])
            .arg(&path)
            .output()
            .map_err(|e| Error::Agent(format!("git worktree add: {e}")))?;
        if !out.status.success() {
            return Err(Error::Agent(format!(
                "git worktree add failed: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        Ok(Worktree {
            repo: repo.to_path_buf(),
            path,
            _dir: dir,
        })
    }
}

impl Drop for Worktree {
    fn drop(&mut self) {
        let _ = Command::new("git")
            .arg("-C")
            .arg(&self.repo)
            .args(["worktree", "remove", "--force"])
            .arg(&self.path)
            .output();
    }
}

pub struct AgentOptions {
    pub isolation: Isolation,
    pub background: bool,
}

/// Build the child session: fresh context, scoped rules and pool, sidechain file.
fn child_session(h: &Harness, def: &AgentDefinition, parent: &ParentLink, project_dir: PathBuf) -> Result<Session> {
    let agent_id = parent.next_agent_id();
    let path = parent.transcript_dir.join(format!("{agent_id}.jsonl"));
    let mut child = Session::create_at(h, &path, &agent_id, project_dir, true)?;
    let mut base = parent.base_rules.clone();
    for d in &def.disallowed_tools {
        base.push(parse_rule(d, Effect::Deny, RuleSource::Agent)?);
    }
    let scoped = scope_tools(&base, &parent.session_rules, def.tools.as_deref())?;
    child.session_rules = scoped[base.len()..].to_vec();
    child.base_rules = base;
    child.set_mode(resolve_permission_override(parent.mode, def.permission_mode));
    child.pool = scope_pool(&parent.pool, def);
    child.model_id = def.model.clone().unwrap_or_else(|| parent.model_id.clone());
    child.max_turns = def.max_turns.or(h.config.max_turns);
    child.system_prompt = Some(def.system_prompt.clone());
    child.depth = parent.depth + 1;
    child.agent_name = Some(def.name.clone());
    child.ask_events = Some(parent.ask_events.clone());
    Ok(child)
}

fn write_meta(path: &Path, meta: &SidechainMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

async fn drive_child(
    h: &Arc<Harness>,
    def: &AgentDefinition,
    parent: &ParentLink,
    mut child: Session,
    prompt: &str,
    cancel: CancellationToken,
) -> Result<AgentRun> {
    let transcript_path = child.transcript_path();
    let meta_path = transcript_path.with_extension("meta.json");
    let agent_id = child.session_id().to_string();
    let mut meta = SidechainMeta {
        agent_id: agent_id.clone(),
        agent_type: def.name.clone(),
        parent_session: parent.session_id.clone(),
        started_at: Utc::now(),
        ended_at: None,
        turn_count: 0,
        outcome: "running".into(),
        error: None,
    };
    write_meta(&meta_path, &meta)?;
    let update = |status: &str| LoopEvent::SubagentUpdate {
        agent_id: agent_id.clone(),
        agent_type: def.name.clone(),
        status: status.into(),
        transcript_path: transcript_path.clone(),
    };
    parent.events.emit(update("started"));

    let out = run_turn(h, &mut child, prompt, cancel).await;
    child.join_background().await;

    let stop = h
        .hooks
        .fire(
            HookEvent::SubagentStop,
            Some(&def.name),
            json!({
                "session_id": parent.session_id,
                "agent_id": agent_id,
                "agent_type": def.name,
                "agent_transcript_path": transcript_path,
                "stop_reason": out.reason.as_str(),
            }),
        )
        .await;
    for n in stop.notifications {
        parent.events.emit(LoopEvent::Notification(n));
    }

    meta.ended_at = Some(Utc::now());
    meta.turn_count = out.model_calls;
    meta.outcome = out.reason.as_str().into();
    meta.error = out.error.clone();
    write_meta(&meta_path, &meta)?;
    parent.events.emit(update(out.reason.as_str()));

    Ok(AgentRun {
        agent_id,
        summary_text: out.final_text,
        reason: out.reason,
        error: out.error,
        sidechain: SidechainRecord {
            transcript_path,
            meta_path,
        },
        messages: child.messages().to_vec(),
    })
}

/// Run `def` on `prompt` as a sidechain of `parent`. Foreground only.
pub async fn run_agent(
    h: &Arc<Harness>,
    def: &AgentDefinition,
    prompt: &str,
    parent: &ParentLink,
    isolation: Isolation,
    cancel: CancellationToken,
) -> Result<AgentRun> {
    if parent.depth >= h.config.max_agent_depth {
        return Err(Error::Agent(format!(
            "agent depth limit {} reached",
            h.config.max_agent_depth
        )));
    }
    let (project_dir, worktree) = match isolation {
        Isolation::InProcess => (parent.project_dir.clone(), None),
        Isolation::Worktree => {
            let wt = Worktree::add(&parent.project_dir)?;
            (wt.path.clone(), Some(wt))
        }
        Isolation::Remote => return Err(Error::Agent("remote isolation is not supported".into())),
    };
    let child = child_session(h, def, parent, project_dir)?;
    let run = drive_child(h, def, parent, child, prompt, cancel).await;
    drop(worktree);
    run
}

fn run_to_outcome(tool_use_id: &str, run: Result<AgentRun>) -> ToolOutcome {
    match run {
        Ok(r) if r.reason == StopReason::TextOnly => ToolOutcome::ok(tool_use_id, r.summary_text),
        Ok(r) => {
            let why = r.error.map(|e| format!(": {e}")).unwrap_or_default();
            let mut text = format!("subagent {} stopped ({}){why}", r.agent_id, r.reason);
            if !r.summary_text.is_empty() {
                text.push_str("\n\n");
                text.push_str(&r.summary_text);
            }
            ToolOutcome::error(tool_use_id, text).with_reason(r.reason.as_str())
        }
        Err(e) => ToolOutcome::error(tool_use_id, e.to_string()).with_reason("agent_error"),
    }
}

/// Connects the Agent tool to [`run_agent`].
pub struct SubagentDelegate {
    harness: Arc<Harness>,
    parent: ParentLink,
}

impl SubagentDelegate {
    pub fn new(harness: Arc<Harness>, parent: ParentLink) -> Self {
        SubagentDelegate { harness, parent }
    }
}

#[async_trait]
impl AgentDelegate for SubagentDelegate {
    async fn delegate(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        let h = &self.harness;
        let id = req.tool_use_id.as_str();
        let str_field = |k: &str| req.input.get(k).and_then(Value::as_str);
        let Some(kind) = str_field("subagent_type") else {
            return ToolOutcome::error(id, "subagent_type is required");
        };
        let Some(def) = h.agents.iter().find(|d| d.name == kind).cloned() else {
            return ToolOutcome::error(id, format!("unknown agent type {kind:?}"));
        };
        let prompt = str_field("prompt").unwrap_or_default().to_string();
        let isolation = match str_field("isolation").unwrap_or("in_process") {
            "in_process" | "" => Isolation::InProcess,
            "worktree" => Isolation::Worktree,
            "remote" => return ToolOutcome::error(id, "remote isolation is not supported"),
            other => return ToolOutcome::error(id, format!("unknown isolation {other:?}")),
        };
        let background = req.input.get("background").and_then(Value::as_bool).unwrap_or(false);

        if !background {
            let run = run_agent(h, &def, &prompt, &self.parent, isolation, ctx.cancel.clone()).await;
            return run_to_outcome(id, run);
        }

        if self.parent.depth >= h.config.max_agent_depth {
            return ToolOutcome::error(id, format!("agent depth limit {} reached", h.config.max_agent_depth));
        }
        // Background: the sidechain is created now so its id can be returned.
        let (project_dir, worktree) = match isolation {
            Isolation::Worktree => match Worktree::add(&self.parent.project_dir) {
                Ok(wt) => (wt.path.clone(), Some(wt)),
                Err(e) => return ToolOutcome::error(id, e.to_string()),
            },
            _ => (self.parent.project_dir.clone(), None),
        };
        let child = match child_session(h, &def, &self.parent, project_dir) {
            Ok(c) => c,
            Err(e) => return ToolOutcome::error(id, e.to_string()),
        };
        let agent_id = child.session_id().to_string();
        let parent = self.parent.clone();
        let h = h.clone();
        let task = tokio::spawn(async move {
            let run = drive_child(&h, &def, &parent, child, &prompt, CancellationToken::new()).await;
            drop(worktree);
            let text = match run {
                Ok(r) => format!("Background agent {} ({}) finished [{}]:\n{}", r.agent_id, def.name, r.reason, r.summary_text),
                Err(e) => format!("Background agent ({}) failed: {e}", def.name),
            };
            parent.background.lock().unwrap().push(Message::attachment(text));
        });
        self.parent.background_tasks.lock().unwrap().push(task);
        ToolOutcome::ok(id, format!("Started background agent {agent_id}. Its result arrives on a later turn."))
    }
}

//! The turn engine. Headless, interactive, control-server and subagent runs
//! all go through [`run_turn`].

mod gate;
mod recovery;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use futures::future::BoxFuture;
use futures::StreamExt;
use serde_json::{json, Value};
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;

use crate::compaction::{
    messages_after_compact_boundary, run_shapers, CollapseEntry, CollapseStore, PersistOp, ShaperContext, ShaperReport, TraceEntry, COMPACT_PROMPT,
};
use crate::config::{CompactionConfig, HarnessPaths, Settings, DEFAULT_BUDGET_CHARS};
use crate::context::{
    activation_attachment, assemble_context, lazy_load_rules, ContextMemo, ContextSources, LazyRules,
    DEFAULT_SYSTEM_PROMPT,
};
use crate::error::{Error, Result};
use crate::hooks::{HookEvent, HookPermission, HookRegistry};
use crate::model::{
    collect_response, normalize_for_model, BackendError, BackendSummarizer, ModelBackend, ModelCall, ModelResponse,
    Summarizer, ThinkingConfig,
};
use crate::permissions::{
    parse_rule, prefilter_tools, Classifier, Effect, HeuristicClassifier, PermissionMode, PermissionRule, RuleSource,
    SandboxConfig,
};
use crate::persistence::{
    find_transcript, fork_session, load_transcript, rewind_files, transcript_path, Checkpointer, FileCheckpoint,
    SessionStore,
};
use crate::subagent::{builtin_agents, load_agent_definitions, AgentDefinition, AgentSource, ParentLink, SubagentDelegate};
use crate::tools::mcp::connect_all;
use crate::tools::skills::load_skills;
use crate::tools::{
    assemble_tool_pool, execute_streaming, Attachment, CheckpointSink, PoolConfig, ToolContext, ToolOutcome, ToolPool,
    ToolRequest,
};
use crate::types::{
    estimate_context_tokens, new_id, ContentBlock, EventPayload, Message, Notification, RecoveryCounters, Role,
    SessionHandle, SessionMeta, TranscriptEvent, TurnState,
};

pub use gate::{session_allow_rule, AskAnswer, AskResolver, PermissionRequest, QueueResolver, StaticResolver};
pub use recovery::{
    check_stop, recover, ModelFailure, RecoveryAction, RecoveryConfig, StopFlags, StopReason,
    MAX_OUTPUT_TOKENS_RECOVERY_LIMIT,
};

const MCP_CONNECT_TIMEOUT: std::time::Duration = std::time::Duration::from_secs(10);

/// Reactive compaction must bring the estimate to this fraction of the window.
pub const REACTIVE_TARGET_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub enum LoopEvent {
    StreamDelta {
        text: String,
    },
    RequestStart {
        model_id: String,
        estimate: u64,
        window: u64,
        trace: Vec<TraceEntry>,
    },
    /// A transcript line, emitted as it is appended.
    Message(TranscriptEvent),
    /// A streamed message that was discarded and never persisted.
    Tombstone {
        uuid: String,
        reason: String,
    },
    ToolUseSummary {
        tool_use_id: String,
        tool_name: String,
        is_error: bool,
        summary: String,
    },
    PermissionRequest(PermissionRequest),
    Notification(Notification),
    SubagentUpdate {
        agent_id: String,
        agent_type: String,
        status: String,
        transcript_path: PathBuf,
    },
    Done {
        reason: StopReason,
        error: Option<String>,
    },
}

impl LoopEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            LoopEvent::StreamDelta { .. } => "stream_delta",
            LoopEvent::RequestStart { .. } => "request_start",
            LoopEvent::Message(_) => "message",
            LoopEvent::Tombstone { .. } => "tombstone",
            LoopEvent::ToolUseSummary { .. } => "tool_use_summary",
            LoopEvent::PermissionRequest(_) => "permission_request",
            LoopEvent::Notification(_) => "notification",
            LoopEvent::SubagentUpdate { .. } => "subagent_update",
            LoopEvent::Done { .. } => "done",
        }
    }

    /// `{"kind": ..., "payload": ...}`; message payloads are the transcript line itself.
    pub fn to_json(&self) -> Value {
        let payload = match self {
            LoopEvent::StreamDelta { text } => json!({ "text": text }),
            LoopEvent::RequestStart {
                model_id,
                estimate,
                window,
                trace,
            } => json!({"model_id": model_id, "estimate": estimate, "window": window, "trace": trace}),
            LoopEvent::Message(ev) => serde_json::from_str(&ev.to_line()).expect("transcript line is JSON"),
            LoopEvent::Tombstone { uuid, reason } => json!({"uuid": uuid, "reason": reason}),
            LoopEvent::ToolUseSummary {
                tool_use_id,
                tool_name,
                is_error,
                summary,
            } => json!({"tool_use_id": tool_use_id, "tool_name": tool_name, "is_error": is_error, "summary": summary}),
            LoopEvent::PermissionRequest(r) => serde_json::to_value(r).expect("serializable"),
            LoopEvent::Notification(n) => serde_json::to_value(n).expect("serializable"),
            LoopEvent::SubagentUpdate {
                agent_id,
                agent_type,
                status,
                transcript_path,
            } => json!({"agent_id": agent_id, "agent_type": agent_type, "status": status, "transcript_path": transcript_path}),
            LoopEvent::Done { reason, error } => json!({"reason": reason, "error": error}),
        };
        json!({"kind": self.kind(), "payload": payload})
    }
}

/// Fan-out of loop events. Clones share subscribers.
#[derive(Clone, Default)]
pub struct EventBus {
    subs: Arc<Mutex<Vec<mpsc::UnboundedSender<LoopEvent>>>>,
}

impl EventBus {
    pub fn new() -> Self {
        EventBus::default()
    }

    pub fn subscribe(&self) -> mpsc::UnboundedReceiver<LoopEvent> {
        let (tx, rx) = mpsc::unbounded_channel();
        self.subs.lock().unwrap().push(tx);
        rx
    }

    pub fn emit(&self, ev: LoopEvent) {
        self.subs.lock().unwrap().retain(|tx| tx.send(ev.clone()).is_ok());
    }

    pub fn subscriber_count(&self) -> usize {
        self.subs.lock().unwrap().len()
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub max_turns: Option<u32>,
    pub max_output_tokens: u32,
    pub thinking: Option<ThinkingConfig>,
    pub max_agent_depth: u32,
    pub compact_prompt: String,
    pub base_system_prompt: String,
    pub append_system_prompt: Option<String>,
    pub default_mode: PermissionMode,
    pub model: String,
    pub fallback_model: Option<String>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            max_turns: None,
            max_output_tokens: 8_192,
            thinking: None,
            max_agent_depth: 2,
            compact_prompt: COMPACT_PROMPT.to_string(),
            base_system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            append_system_prompt: None,
            default_mode: PermissionMode::Default,
            model: "default".into(),
            fallback_model: None,
        }
    }
}

/// Counters that let tests confirm every entry point drives the same loop.
#[derive(Debug, Default)]
pub struct EngineStats {
    run_turn_calls: AtomicU64,
    model_calls: AtomicU64,
}

impl EngineStats {
    pub fn run_turn_calls(&self) -> u64 {
        self.run_turn_calls.load(Ordering::SeqCst)
    }

    pub fn model_calls(&self) -> u64 {
        self.model_calls.load(Ordering::SeqCst)
    }
}

/// Everything shared by the sessions of one process.
pub struct Harness {
    pub backend: Arc<dyn ModelBackend>,
    pub summarizer: Arc<dyn Summarizer>,
    pub hooks: HookRegistry,
    pub classifier: Arc<dyn Classifier>,
    pub resolver: Arc<dyn AskResolver>,
    pub paths: HarnessPaths,
    /// Managed, settings and CLI rules.
    pub rules: Vec<PermissionRule>,
    pub sandbox: SandboxConfig,
    pub compaction: CompactionConfig,
    pub pool: ToolPool,
    pub agents: Vec<AgentDefinition>,
    pub config: EngineConfig,
    pub stats: EngineStats,
}

impl Harness {
    /// Built-in tools and agents, no rules, asks denied.
    pub fn new(backend: Arc<dyn ModelBackend>, paths: HarnessPaths) -> Self {
        let config = EngineConfig::default();
        let agents = builtin_agents();
        let pool = default_pool(&agents, &[]);
        Harness {
            summarizer: Arc::new(BackendSummarizer::new(backend.clone(), config.model.clone())),
            backend,
            hooks: HookRegistry::new(),
            classifier: Arc::new(HeuristicClassifier),
            resolver: Arc::new(StaticResolver(AskAnswer::Deny)),
            paths,
            rules: Vec::new(),
            sandbox: SandboxConfig::disabled(),
            compaction: CompactionConfig::default(),
            pool,
            agents,
            config,
            stats: EngineStats::default(),
        }
    }

    /// Apply merged settings: rules, hooks, sandbox, compaction and models.
    pub fn with_settings(mut self, settings: &Settings) -> Result<Self> {
        self.rules = settings.rules.clone();
        self.hooks = HookRegistry::from_configs(&settings.hooks)?;
        self.sandbox = settings.sandbox.clone();
        self.compaction = settings.compaction.clone();
        if let Some(m) = &settings.model {
            self.config.model = m.clone();
        }
        if settings.fallback_model.is_some() {
            self.config.fallback_model = settings.fallback_model.clone();
        }
        if let Some(mode) = settings.default_mode {
            self.config.default_mode = mode;
        }
        self.pool = self.pool.retain(|s| !settings.simple_mode || crate::tools::SIMPLE_MODE_TOOLS.contains(&s.name.as_str()));
        Ok(self)
    }

    /// Skills, custom agents and MCP servers for `project_dir`, then the pool
    /// is reassembled against the current rules.
    pub async fn load_extensions(mut self, settings: &Settings, project_dir: &Path) -> (Self, Vec<Notification>) {
        let user_claude = self.paths.user_home.join(".claude");
        let project_claude = project_dir.join(".claude");
        let (skills, mut notes) = load_skills(&[project_claude.join("skills"), user_claude.join("skills")]);
        let (agents, n) = load_agent_definitions(&[
            (user_claude.join("agents"), AgentSource::User),
            (project_claude.join("agents"), AgentSource::Project),
        ]);
        notes.extend(n);
        let (mcp, n) = connect_all(&settings.mcp_servers, MCP_CONNECT_TIMEOUT).await;
        notes.extend(n);
        let cfg = PoolConfig {
            simple_mode: settings.simple_mode,
            include_agent: true,
            skills,
            agents: agents.iter().map(|a| (a.name.clone(), a.description.clone())).collect(),
        };
        self.pool = assemble_tool_pool(&cfg, mcp, &self.rules);
        self.agents = agents;
        (self, notes)
    }

    pub fn with_rules(mut self, rules: Vec<PermissionRule>) -> Self {
        self.pool = self.pool.retain(|s| !crate::permissions::is_blanket_denied(&s.name, &rules));
        self.rules = rules;
        self
    }

    pub fn with_hooks(mut self, hooks: HookRegistry) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn with_resolver(mut self, resolver: Arc<dyn AskResolver>) -> Self {
        self.resolver = resolver;
        self
    }

    pub fn with_summarizer(mut self, summarizer: Arc<dyn Summarizer>) -> Self {
        self.summarizer = summarizer;
        self
    }

    pub fn with_classifier(mut self, classifier: Arc<dyn Classifier>) -> Self {
        self.classifier = classifier;
        self
    }

    pub fn with_compaction(mut self, cfg: CompactionConfig) -> Self {
        self.compaction = cfg;
        self
    }

    pub fn with_pool(mut self, pool: ToolPool) -> Self {
        self.pool = pool;
        self
    }

    pub fn with_agents(mut self, agents: Vec<AgentDefinition>) -> Self {
        self.agents = agents;
        self
    }

    pub fn with_config(mut self, config: EngineConfig) -> Self {
        self.config = config;
        self
    }

    pub fn with_sandbox(mut self, sandbox: SandboxConfig) -> Self {
        self.sandbox = sandbox;
        self
    }

    pub fn into_shared(self) -> Arc<Harness> {
        Arc::new(self)
    }
}

/// Built-ins plus Skill and Agent, deny-prefiltered by `rules`.
pub fn default_pool(agents: &[AgentDefinition], rules: &[PermissionRule]) -> ToolPool {
    let cfg = PoolConfig {
        include_agent: true,
        agents: agents.iter().map(|a| (a.name.clone(), a.description.clone())).collect(),
        ..PoolConfig::default()
    };
    assemble_tool_pool(&cfg, Vec::new(), rules)
}

/// Appends transcript lines and mirrors each one onto the event bus, under
/// one lock so bus order equals file order.
#[derive(Clone)]
pub(crate) struct Writer {
    store: Arc<Mutex<SessionStore>>,
    events: EventBus,
    session_id: String,
}

impl Writer {
    pub(crate) fn write(&self, ev: TranscriptEvent) -> Result<()> {
        let mut store = self.store.lock().unwrap();
        store.append(&ev)?;
        self.events.emit(LoopEvent::Message(ev));
        Ok(())
    }

    fn message(&self, m: &Message) -> Result<()> {
        self.write(TranscriptEvent::from_message(&self.session_id, m))
    }
}

/// Takes the snapshot, then appends its `file_history_snapshot` line.
struct TranscriptCheckpoints {
    checkpointer: Checkpointer,
    writer: Writer,
    taken: Mutex<Vec<FileCheckpoint>>,
}

impl CheckpointSink for TranscriptCheckpoints {
    fn checkpoint(&self, path: &Path) -> Result<FileCheckpoint> {
        let cp = self.checkpointer.checkpoint(path)?;
        self.writer
            .write(TranscriptEvent::new(&self.writer.session_id, EventPayload::FileHistorySnapshot(cp.clone())))?;
        self.taken.lock().unwrap().push(cp.clone());
        Ok(cp)
    }
}

/// One conversation: identity, live state and its transcript writer.
pub struct Session {
    pub handle: SessionHandle,
    writer: Writer,
    checkpoints: Arc<TranscriptCheckpoints>,
    /// Managed, settings, CLI and agent rules.
    pub base_rules: Vec<PermissionRule>,
    /// "Always allow" grants. Never written to disk.
    pub session_rules: Vec<PermissionRule>,
    pub memo: ContextMemo,
    pub collapse_store: CollapseStore,
    pub lazy_rules: LazyRules,
    pub events: EventBus,
    /// Where permission requests go; a bubbling subagent points this at its parent.
    pub ask_events: Option<EventBus>,
    pub pool: ToolPool,
    pub model_id: String,
    pub max_turns: Option<u32>,
    /// Replaces the base system prompt (agent definitions).
    pub system_prompt: Option<String>,
    pub depth: u32,
    pub is_sidechain: bool,
    pub agent_name: Option<String>,
    pub(crate) agent_counter: Arc<AtomicU32>,
    pub(crate) background: Arc<Mutex<Vec<Message>>>,
    pub(crate) background_tasks: Arc<Mutex<Vec<tokio::task::JoinHandle<()>>>>,
    started: bool,
    resumed: bool,
}

impl Session {
    /// A fresh session whose transcript lives under the harness home.
    pub fn create(h: &Harness, project_dir: impl Into<PathBuf>) -> Result<Session> {
        let project_dir = project_dir.into();
        let id = new_id();
        let path = transcript_path(&h.paths, &project_dir, &id);
        Session::create_at(h, &path, &id, project_dir, false)
    }

    /// A fresh session writing to an explicit path (sidechains).
    pub fn create_at(h: &Harness, path: &Path, id: &str, project_dir: PathBuf, sidechain: bool) -> Result<Session> {
        let mut s = Session::open(h, path, id, project_dir.clone(), 0)?;
        s.is_sidechain = sidechain;
        s.writer.write(TranscriptEvent::new(
            id,
            EventPayload::SessionMeta(SessionMeta::Start { project_dir, sidechain }),
        ))?;
        Ok(s)
    }

    fn open(h: &Harness, path: &Path, id: &str, project_dir: PathBuf, next_checkpoint: u64) -> Result<Session> {
        let store = SessionStore::open(path, id)?;
        let events = EventBus::new();
        let writer = Writer {
            store: Arc::new(Mutex::new(store)),
            events: events.clone(),
            session_id: id.to_string(),
        };
        let checkpoints = Arc::new(TranscriptCheckpoints {
            checkpointer: Checkpointer::new(h.paths.file_history_root(), id, next_checkpoint),
            writer: writer.clone(),
            taken: Mutex::new(Vec::new()),
        });
        Ok(Session {
            handle: SessionHandle::new(id, project_dir, h.config.default_mode),
            writer,
            checkpoints,
            base_rules: h.rules.clone(),
            session_rules: Vec::new(),
            memo: ContextMemo::default(),
            collapse_store: CollapseStore::default(),
            lazy_rules: LazyRules::default(),
            events,
            ask_events: None,
            pool: h.pool.clone(),
            model_id: h.config.model.clone(),
            max_turns: h.config.max_turns,
            system_prompt: None,
            depth: 0,
            is_sidechain: false,
            agent_name: None,
            agent_counter: Arc::new(AtomicU32::new(0)),
            background: Arc::new(Mutex::new(Vec::new())),
            background_tasks: Arc::new(Mutex::new(Vec::new())),
            started: false,
            resumed: false,
        })
    }

    /// Rebuild from the transcript. Session-scoped allows are not restored.
    pub fn resume(h: &Harness, session_id: &str) -> Result<(Session, Vec<Notification>)> {
        let path = find_transcript(&h.paths.projects_root(), session_id)?;
        let loaded = load_transcript(&path)?;
        let project_dir = loaded
            .project_dir
            .clone()
            .ok_or_else(|| Error::Other(format!("session {session_id} has no project directory")))?;
        let next = loaded.checkpoints.iter().map(|c| c.sequence + 1).max().unwrap_or(0);
        let mut s = Session::open(h, &path, session_id, project_dir, next)?;
        s.handle.state.messages = loaded.messages;
        s.handle.state.compaction = loaded.tracking;
        s.collapse_store = loaded.collapse_store;
        s.is_sidechain = s.handle.state.messages.first().is_some_and(|m| m.is_sidechain);
        *s.checkpoints.taken.lock().unwrap() = loaded.checkpoints;
        s.resumed = true;
        Ok((s, loaded.notifications))
    }

    /// Copy the transcript up to `at_uuid` into a new session and open it.
    pub fn fork(h: &Harness, session_id: &str, at_uuid: Option<&str>) -> Result<(Session, Vec<Notification>)> {
        let (new_id, _) = fork_session(&h.paths.projects_root(), session_id, at_uuid)?;
        Session::resume(h, &new_id)
    }

    pub fn session_id(&self) -> &str {
        self.handle.session_id()
    }

    pub fn project_dir(&self) -> &Path {
        self.handle.project_dir()
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.writer.store.lock().unwrap().path().to_path_buf()
    }

    pub fn messages(&self) -> &[Message] {
        &self.handle.state.messages
    }

    pub fn mode(&self) -> PermissionMode {
        self.handle.mode
    }

    pub fn set_mode(&mut self, mode: PermissionMode) {
        self.handle.mode = mode;
    }

    /// Current estimate over the full history.
    pub fn estimate(&self) -> u64 {
        estimate_context_tokens(&self.handle.state.messages, self.handle.state.compaction.snip_tokens_freed)
    }

    pub fn rules(&self) -> Vec<PermissionRule> {
        let mut r = self.base_rules.clone();
        r.extend(self.session_rules.iter().cloned());
        r
    }

    pub fn checkpoints(&self) -> Vec<FileCheckpoint> {
        self.checkpoints.taken.lock().unwrap().clone()
    }

    /// Restore files from this session's checkpoints (all of them when `None`).
    pub fn rewind_files(&self, to_sequence: Option<u64>) -> Result<Vec<PathBuf>> {
        rewind_files(&self.checkpoints(), to_sequence)
    }

    /// Record a collapse range. Both ends must be in the history, in order.
    pub fn commit_collapse(&mut self, from_uuid: &str, to_uuid: &str, summary_text: &str) -> Result<()> {
        let pos = |u: &str| self.handle.state.messages.iter().position(|m| m.uuid == u);
        match (pos(from_uuid), pos(to_uuid)) {
            (Some(a), Some(b)) if a <= b => {}
            _ => return Err(Error::Other(format!("collapse range {from_uuid}..{to_uuid} is not in the history"))),
        }
        self.writer.write(TranscriptEvent::new(
            self.session_id(),
            EventPayload::SessionMeta(SessionMeta::Collapse {
                from_uuid: from_uuid.into(),
                to_uuid: to_uuid.into(),
                summary_text: summary_text.into(),
            }),
        ))?;
        self.collapse_store.push(CollapseEntry {
            from_uuid: from_uuid.into(),
            to_uuid: to_uuid.into(),
            summary_text: summary_text.into(),
        });
        Ok(())
    }

    /// Wait for background subagents started by this session.
    pub async fn join_background(&self) {
        let tasks: Vec<_> = std::mem::take(&mut *self.background_tasks.lock().unwrap());
        for t in tasks {
            let _ = t.await;
        }
    }

    /// Fire SessionEnd and wait for background work.
    pub async fn close(&self, h: &Harness) -> Vec<Notification> {
        self.join_background().await;
        let mut payload = self.hook_payload();
        payload["reason"] = json!("exit");
        h.hooks.fire(HookEvent::SessionEnd, None, payload).await.notifications
    }

    pub fn hook_payload(&self) -> Value {
        json!({
            "session_id": self.session_id(),
            "cwd": self.project_dir(),
            "transcript_path": self.transcript_path(),
            "permission_mode": self.mode().as_str(),
        })
    }

    fn notify(&self, notes: impl IntoIterator<Item = Notification>) {
        for n in notes {
            self.events.emit(LoopEvent::Notification(n));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnOutcome {
    pub reason: StopReason,
    pub error: Option<String>,
    /// Text of the last assistant message that had any.
    pub final_text: String,
    pub model_calls: u32,
}

fn with(base: &Value, extra: Value) -> Value {
    let mut p = base.clone();
    if let (Value::Object(a), Value::Object(b)) = (&mut p, extra) {
        a.extend(b);
    }
    p
}

/// Run one prompt to completion. Emits exactly one `done` event.
pub fn run_turn<'a>(
    h: &'a Arc<Harness>,
    s: &'a mut Session,
    prompt: &'a str,
    cancel: CancellationToken,
) -> BoxFuture<'a, TurnOutcome> {
    Box::pin(async move {
        h.stats.run_turn_calls.fetch_add(1, Ordering::SeqCst);
        let mut t = Turn {
            h,
            cancel: cancel.child_token(),
            state: s.handle.state.clone(),
            turn_rules: Vec::new(),
            final_text: String::new(),
            model_calls: 0,
        };
        let result = t.run(s, prompt).await;
        s.handle.state = t.state.clone();
        let out = match result {
            Ok((reason, error)) => TurnOutcome {
                reason,
                error,
                final_text: t.final_text,
                model_calls: t.model_calls,
            },
            Err(e) => TurnOutcome {
                reason: StopReason::ModelError,
                error: Some(e.to_string()),
                final_text: t.final_text,
                model_calls: t.model_calls,
            },
        };
        s.events.emit(LoopEvent::Done {
            reason: out.reason,
            error: out.error.clone(),
        });
        out
    })
}

struct Turn<'a> {
    h: &'a Arc<Harness>,
    cancel: CancellationToken,
    state: TurnState,
    /// Skill grants, dropped when the turn ends.
    turn_rules: Vec<PermissionRule>,
    final_text: String,
    model_calls: u32,
}

type Stop = (StopReason, Option<String>);

impl Turn<'_> {
    fn append(&mut self, s: &Session, mut m: Message) -> Result<()> {
        m.parent_uuid = self.state.messages.last().map(|x| x.uuid.clone());
        m.is_sidechain = s.is_sidechain;
        s.writer.message(&m)?;
        if m.role == Role::Assistant && m.usage.is_some() {
            self.state.compaction.snip_tokens_freed = 0;
        }
        self.state.messages.push(m);
        Ok(())
    }

    fn rules(&self, s: &Session) -> Vec<PermissionRule> {
        let mut r = s.rules();
        r.extend(self.turn_rules.iter().cloned());
        r
    }

    async fn run(&mut self, s: &mut Session, prompt: &str) -> Result<Stop> {
        let h = self.h;
        self.state = TurnState {
            recovery_counters: RecoveryCounters::default(),
            tool_context: Default::default(),
            ..std::mem::take(&mut self.state)
        };
        let base_payload = s.hook_payload();

        if !s.started {
            s.started = true;
            let source = if s.resumed { "resume" } else { "startup" };
            let o = h.hooks.fire(HookEvent::SessionStart, None, with(&base_payload, json!({ "source": source }))).await;
            s.notify(o.notifications);
            if let Some(ctx) = o.additional_context {
                self.append(s, Message::attachment(ctx))?;
            }
        }

        let o = h
            .hooks
            .fire(HookEvent::UserPromptSubmit, None, with(&base_payload, json!({ "prompt": prompt })))
            .await;
        s.notify(o.notifications);
        if o.permission == Some(HookPermission::Deny) || o.stop {
            let why = o.reason.unwrap_or_else(|| "prompt blocked by UserPromptSubmit hook".into());
            return Ok((StopReason::HookStopped, Some(why)));
        }
        self.append(s, Message::user_text(prompt))?;
        if let Some(ctx) = o.additional_context {
            self.append(s, Message::attachment(ctx))?;
        }
        let finished: Vec<Message> = std::mem::take(&mut *s.background.lock().unwrap());
        for m in finished {
            self.append(s, m)?;
        }

        let mut model_id = s.model_id.clone();
        let mut output_cap = h.config.max_output_tokens;
        let mut dispatch_rounds: u32 = 0;

        loop {
            if self.cancel.is_cancelled() {
                return Ok((StopReason::Aborted, None));
            }
            let report = self.shape(s, false, "auto").await?;
            s.handle.state = self.state.clone();

            let base_prompt = s.system_prompt.clone().unwrap_or_else(|| h.config.base_system_prompt.clone());
            let project_dir = s.project_dir().to_path_buf();
            let src = ContextSources {
                cwd: &project_dir,
                user_home: &h.paths.user_home,
                managed_root: &h.paths.managed_root,
                base_system_prompt: &base_prompt,
                append_system_prompt: h.config.append_system_prompt.as_deref(),
            };
            let (bundle, notes) = assemble_context(&mut s.memo, &src, normalize_for_model(&report.view));
            s.notify(notes);

            let rules = self.rules(s);
            let tools = prefilter_tools(s.pool.specs().to_vec(), &rules);
            s.events.emit(LoopEvent::RequestStart {
                model_id: model_id.clone(),
                estimate: report.tokens_after,
                window: h.compaction.window_tokens,
                trace: report.trace.clone(),
            });
            self.state.tool_context.insert("model_id".into(), json!(model_id));
            self.state.tool_context.insert("max_output_tokens".into(), json!(output_cap));
            let call = ModelCall {
                system_prompt: bundle.system_prompt.clone(),
                messages: bundle.messages(),
                tools,
                thinking: h.config.thinking.clone(),
                model_id: model_id.clone(),
                max_output_tokens: output_cap,
                abort: self.cancel.clone(),
            };
            self.model_calls += 1;
            h.stats.model_calls.fetch_add(1, Ordering::SeqCst);

            let events = s.events.clone();
            let abort = self.cancel.clone();
            let response = async {
                let stream = h.backend.call(call).await?;
                collect_response(stream, &abort, &mut |d| events.emit(LoopEvent::StreamDelta { text: d.to_string() }))
                    .await
            };
            let response = tokio::select! {
                r = response => r,
                _ = self.cancel.cancelled() => Err(BackendError::Aborted),
            };

            let failure = match response {
                Ok(ModelResponse::Complete(msg)) => {
                    match self.after_response(s, msg, &mut dispatch_rounds).await? {
                        Some(stop) => return Ok(stop),
                        None => continue,
                    }
                }
                Ok(ModelResponse::OutputCapHit(partial)) => {
                    s.events.emit(LoopEvent::Tombstone {
                        uuid: partial.uuid,
                        reason: "output_cap".into(),
                    });
                    ModelFailure::OutputCap
                }
                Ok(ModelResponse::PromptTooLong) => ModelFailure::PromptTooLong,
                Err(BackendError::Aborted) => return Ok((StopReason::Aborted, None)),
                Err(e) if e.is_retriable() => ModelFailure::Unavailable(e.to_string()),
                Err(e) => ModelFailure::Other(e.to_string()),
            };
            if self.cancel.is_cancelled() {
                return Ok((StopReason::Aborted, None));
            }
            let cfg = RecoveryConfig {
                base_output_tokens: h.config.max_output_tokens,
                fallback_model: h.config.fallback_model.clone(),
            };
            let mut counters = self.state.recovery_counters;
            match recover(&failure, &counters, &cfg) {
                RecoveryAction::RetryWithLargerOutputCap(cap) => {
                    counters.output_token_escalations += 1;
                    output_cap = cap;
                }
                RecoveryAction::ReactiveCompactThenRetry => {
                    counters.reactive_compact_attempted = true;
                    self.state.recovery_counters = counters;
                    let r = self.shape(s, true, "reactive").await?;
                    let target = REACTIVE_TARGET_FRACTION * h.compaction.window_tokens as f64;
                    if !r.auto_compacted || r.tokens_after as f64 > target {
                        return Ok((StopReason::PromptTooLong, Some("reactive compaction could not free enough context".into())));
                    }
                }
                RecoveryAction::SwitchFallbackModel(m) => {
                    counters.fallback_switched = true;
                    s.notify([Notification::new("model", format!("switching to fallback model {m}"))]);
                    model_id = m;
                }
                RecoveryAction::Fail(reason, msg) => {
                    self.state.recovery_counters = counters;
                    return Ok((reason, Some(msg)));
                }
            }
            // Continue point: the state is replaced as a whole.
            self.state = TurnState {
                recovery_counters: counters,
                ..std::mem::take(&mut self.state)
            };
            s.handle.state = self.state.clone();
        }
    }

    /// Run the shapers over the history and persist what they produced.
    async fn shape(&mut self, s: &mut Session, force: bool, trigger: &str) -> Result<ShaperReport> {
        let h = self.h;
        let report = {
            let pool = &s.pool;
            let caps = |name: &str| pool.spec(name).map_or(Some(DEFAULT_BUDGET_CHARS), |sp| sp.max_result_size_chars);
            run_shapers(
                messages_after_compact_boundary(&self.state.messages).to_vec(),
                ShaperContext {
                    cfg: &h.compaction,
                    caps: &caps,
                    collapse_store: &s.collapse_store,
                    summarizer: h.summarizer.as_ref(),
                    hooks: &h.hooks,
                    hook_payload: s.hook_payload(),
                    attachments: Vec::new(),
                    compact_prompt: &h.config.compact_prompt,
                    snip_tokens_freed: self.state.compaction.snip_tokens_freed,
                    force_compact: force,
                    trigger,
                },
            )
            .await
        };
        for op in &report.persist {
            let ev = match op {
                PersistOp::Replacement(r) => TranscriptEvent::new(s.session_id(), EventPayload::ContentReplacement(r.clone())),
                PersistOp::Boundary { uuid, boundary } => {
                    let mut ev = TranscriptEvent::new(s.session_id(), EventPayload::CompactBoundary(boundary.clone()));
                    ev.uuid = uuid.clone();
                    if let Some(marker) = report.history.iter().find(|m| &m.uuid == uuid) {
                        ev.timestamp = marker.timestamp;
                    }
                    ev
                }
                PersistOp::Message(m) => TranscriptEvent::from_message(s.session_id(), m),
            };
            s.writer.write(ev)?;
        }
        s.notify(report.notifications.clone());
        self.state.messages = report.history.clone();
        self.state.compaction.snip_tokens_freed = report.snip_tokens_freed;
        self.state.compaction.last_trace = report.trace.clone();
        if report.auto_compacted {
            self.state.compaction.auto_compactions += 1;
            s.collapse_store.clear();
            s.memo.invalidate();
            s.lazy_rules.clear();
        }
        Ok(report)
    }

    /// Persist the assistant message, dispatch its tool calls and decide whether to stop.
    async fn after_response(&mut self, s: &mut Session, msg: Message, rounds: &mut u32) -> Result<Option<Stop>> {
        let h = self.h;
        let text = msg.text();
        if !text.is_empty() {
            self.final_text = text;
        }
        let requests: Vec<ToolRequest> = msg
            .tool_uses()
            .map(|(id, name, input)| ToolRequest::new(id, name, input.clone()))
            .collect();
        self.append(s, msg)?;

        if requests.is_empty() {
            let o = h
                .hooks
                .fire(HookEvent::Stop, None, with(&s.hook_payload(), json!({"last_message": self.final_text})))
                .await;
            s.notify(o.notifications);
            let flags = StopFlags {
                aborted: self.cancel.is_cancelled(),
                text_only: true,
                ..StopFlags::default()
            };
            return Ok(check_stop(flags).map(|r| (r, None)));
        }

        let hook_stopped = self.dispatch(s, requests).await?;
        *rounds += 1;
        let flags = StopFlags {
            aborted: self.cancel.is_cancelled(),
            hook_stopped,
            turns_exhausted: s.max_turns.is_some_and(|m| *rounds >= m),
            ..StopFlags::default()
        };
        // Continue point: the state is replaced as a whole.
        self.state = TurnState {
            tool_context: {
                let mut c = std::mem::take(&mut self.state.tool_context);
                c.insert("dispatch_rounds".into(), json!(*rounds));
                c
            },
            ..std::mem::take(&mut self.state)
        };
        s.handle.state = self.state.clone();
        Ok(check_stop(flags).map(|r| (r, None)))
    }

    /// Gate, execute and record one batch of tool calls. Returns the hook-stop flag.
    async fn dispatch(&mut self, s: &mut Session, requests: Vec<ToolRequest>) -> Result<bool> {
        let h = self.h;
        let n = requests.len();
        let mut slots: Vec<Option<ToolOutcome>> = vec![None; n];
        let mut executed: Vec<Option<ToolRequest>> = vec![None; n];
        let mut runnable = Vec::new();
        let mut positions = Vec::new();
        let mut post_attachments: Vec<Message> = Vec::new();
        let payload = s.hook_payload();

        for (i, req) in requests.iter().enumerate() {
            if self.cancel.is_cancelled() {
                slots[i] = Some(ToolOutcome::error(&req.tool_use_id, "tool call aborted").with_reason("aborted"));
                continue;
            }
            let rules = self.rules(s);
            let ask_bus = s.ask_events.clone().unwrap_or_else(|| s.events.clone());
            let g = gate::gate(
                &gate::GateInput {
                    hooks: &h.hooks,
                    classifier: h.classifier.as_ref(),
                    resolver: h.resolver.as_ref(),
                    events: &ask_bus,
                    project_dir: s.handle.project_dir(),
                    session_id: s.handle.session_id(),
                    mode: s.handle.mode,
                    rules: &rules,
                    transcript: &self.state.messages,
                    hook_payload: &payload,
                    agent: s.agent_name.as_deref(),
                },
                req.clone(),
            )
            .await;
            s.notify(g.notifications);
            if let Some(rule) = g.session_allow {
                s.session_rules.push(rule);
            }
            if g.abort {
                self.cancel.cancel();
            }
            match g.result {
                Ok(r) => {
                    if g.input_rewritten {
                        post_attachments.push(Message::attachment(format!(
                            "PreToolUse hook rewrote the input of {}: {}",
                            r.tool_use_id, r.input
                        )));
                    }
                    executed[i] = Some(r.clone());
                    runnable.push(r);
                    positions.push(i);
                }
                Err(o) => slots[i] = Some(o),
            }
        }

        let ctx = ToolContext {
            project_dir: s.project_dir().to_path_buf(),
            session_id: s.session_id().to_string(),
            cancel: self.cancel.clone(),
            sandbox: h.sandbox.clone(),
            checkpoints: Some(s.checkpoints.clone() as Arc<dyn CheckpointSink>),
            delegate: Some(Arc::new(SubagentDelegate::new(h.clone(), ParentLink::of(s, &self.turn_rules)))),
        };

        let mut hook_stopped = false;
        let mut next = 0;
        let mut outcomes: Vec<ToolOutcome> = Vec::with_capacity(n);
        {
            let mut stream = execute_streaming(runnable, &s.pool, &ctx);
            let mut k = 0;
            loop {
                while next < n && slots[next].is_some() {
                    let o = slots[next].take().expect("filled");
                    let o = self
                        .record(s, executed[next].as_ref(), &requests[next], o, &payload, &mut hook_stopped, &mut post_attachments)
                        .await?;
                    outcomes.push(o);
                    next += 1;
                }
                if next == n {
                    break;
                }
                match stream.next().await {
                    Some(o) => {
                        slots[positions[k]] = Some(o);
                        k += 1;
                    }
                    None => {
                        // Nothing left to run; anything still empty was never dispatched.
                        for (i, slot) in slots.iter_mut().enumerate().skip(next) {
                            slot.get_or_insert_with(|| {
                                ToolOutcome::error(&requests[i].tool_use_id, "tool call aborted").with_reason("aborted")
                            });
                        }
                    }
                }
            }
        }

        for (i, o) in outcomes.iter().enumerate() {
            for a in &o.attachments {
                match a {
                    Attachment::Context { text, .. } => post_attachments.push(Message::attachment(text.clone())),
                    Attachment::SessionAllow { rules } => {
                        for r in rules {
                            match parse_rule(r, Effect::Allow, RuleSource::Session) {
                                Ok(rule) => self.turn_rules.push(rule),
                                Err(e) => s.notify([Notification::new("skill", format!("bad allowed-tools rule: {e}"))]),
                            }
                        }
                    }
                }
            }
            if let Some(req) = executed[i].as_ref().filter(|r| r.tool_name == "FileRead" && !o.is_error) {
                let path = req.input.get("path").and_then(Value::as_str).unwrap_or_default();
                let path = ctx.resolve(path);
                let project_dir = s.project_dir().to_path_buf();
                let files = lazy_load_rules(&path, &project_dir, &h.paths.user_home, &mut s.lazy_rules);
                if let Some(m) = activation_attachment(&files) {
                    s.memo.invalidate();
                    post_attachments.push(m);
                }
            }
        }
        for m in post_attachments {
            self.append(s, m)?;
        }
        Ok(hook_stopped)
    }

    /// Append one result in order, running post hooks around it.
    #[allow(clippy::too_many_arguments)]
    async fn record(
        &mut self,
        s: &Session,
        executed: Option<&ToolRequest>,
        original: &ToolRequest,
        mut outcome: ToolOutcome,
        payload: &Value,
        hook_stopped: &mut bool,
        post_attachments: &mut Vec<Message>,
    ) -> Result<ToolOutcome> {
        let h = self.h;
        let is_mcp = s.pool.spec(&original.tool_name).is_some_and(|sp| sp.is_mcp());
        let result_message = |o: &ToolOutcome| {
            Message::new(Role::User, vec![ContentBlock::tool_result(&o.tool_use_id, o.content.clone(), o.is_error)])
        };
        let fire = |req: &ToolRequest, o: &ToolOutcome| {
            let event = if o.is_error { HookEvent::PostToolUseFailure } else { HookEvent::PostToolUse };
            let p = with(
                payload,
                json!({
                    "tool_name": req.tool_name,
                    "tool_input": req.input,
                    "tool_use_id": req.tool_use_id,
                    "tool_response": o.content,
                    "is_error": o.is_error,
                }),
            );
            let name = req.tool_name.clone();
            async move { h.hooks.fire(event, Some(&name), p).await }
        };

        match executed {
            // MCP results wait for post hooks so they can be rewritten.
            Some(req) if is_mcp => {
                let o = fire(req, &outcome).await;
                if let Some(text) = o.updated_mcp_tool_output.clone() {
                    outcome.content = text;
                }
                self.append(s, result_message(&outcome))?;
                self.after_post_hook(s, o, hook_stopped, post_attachments);
            }
            Some(req) => {
                self.append(s, result_message(&outcome))?;
                let o = fire(req, &outcome).await;
                self.after_post_hook(s, o, hook_stopped, post_attachments);
            }
            None => self.append(s, result_message(&outcome))?,
        }
        let summary: String = outcome.content.lines().next().unwrap_or_default().chars().take(120).collect();
        s.events.emit(LoopEvent::ToolUseSummary {
            tool_use_id: outcome.tool_use_id.clone(),
            tool_name: original.tool_name.clone(),
            is_error: outcome.is_error,
            summary,
        });
        Ok(outcome)
    }

    fn after_post_hook(
        &self,
        s: &Session,
        o: crate::hooks::HookOutcome,
        hook_stopped: &mut bool,
        post_attachments: &mut Vec<Message>,
    ) {
        s.notify(o.notifications);
        if o.stop {
            *hook_stopped = true;
        }
        if let Some(ctx) = o.additional_context {
            post_attachments.push(Message::attachment(ctx));
        }
    }
}

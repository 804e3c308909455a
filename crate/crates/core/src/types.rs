//! Shared vocabulary: content blocks, messages, transcript events and token
//! accounting.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::compaction::{CompactionBoundary, CompactionTracking, ContentReplacement};
use crate::permissions::PermissionMode;
use crate::persistence::FileCheckpoint;

/// Fresh opaque identifier.
pub fn new_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ContentBlock {
    Text {
        text: String,
    },
    ToolUse {
        id: String,
        name: String,
        input: Value,
    },
    ToolResult {
        tool_use_id: String,
        content: String,
        #[serde(default, skip_serializing_if = "is_false")]
        is_error: bool,
    },
    Thinking {
        thinking: String,
    },
}

impl ContentBlock {
    pub fn text(text: impl Into<String>) -> Self {
        ContentBlock::Text { text: text.into() }
    }

    pub fn tool_result(tool_use_id: impl Into<String>, content: impl Into<String>, is_error: bool) -> Self {
        ContentBlock::ToolResult {
            tool_use_id: tool_use_id.into(),
            content: content.into(),
            is_error,
        }
    }

    /// Character count of the block's canonical serialization.
    pub fn serialized_chars(&self) -> usize {
        serde_json::to_string(self)
            .map(|s| s.chars().count())
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
    System,
    Attachment,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub uuid: String,
    pub parent_uuid: Option<String>,
    pub role: Role,
    pub blocks: Vec<ContentBlock>,
    pub timestamp: DateTime<Utc>,
    pub usage: Option<TokenUsage>,
    pub is_sidechain: bool,
}

impl Message {
    pub fn new(role: Role, blocks: Vec<ContentBlock>) -> Self {
        Message {
            uuid: new_id(),
            parent_uuid: None,
            role,
            blocks,
            timestamp: Utc::now(),
            usage: None,
            is_sidechain: false,
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Message::new(Role::User, vec![ContentBlock::text(text)])
    }

    pub fn assistant_text(text: impl Into<String>) -> Self {
        Message::new(Role::Assistant, vec![ContentBlock::text(text)])
    }

    pub fn attachment(text: impl Into<String>) -> Self {
        Message::new(Role::Attachment, vec![ContentBlock::text(text)])
    }

    pub fn with_parent(mut self, parent: Option<String>) -> Self {
        self.parent_uuid = parent;
        self
    }

    /// Concatenated text of all text blocks.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            if let ContentBlock::Text { text } = b {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(text);
            }
        }
        out
    }

    pub fn tool_uses(&self) -> impl Iterator<Item = (&str, &str, &Value)> {
        self.blocks.iter().filter_map(|b| match b {
            ContentBlock::ToolUse { id, name, input } => Some((id.as_str(), name.as_str(), input)),
            _ => None,
        })
    }

    pub fn has_tool_use(&self) -> bool {
        self.tool_uses().next().is_some()
    }

    pub fn is_tool_result(&self) -> bool {
        self.blocks
            .iter()
            .any(|b| matches!(b, ContentBlock::ToolResult { .. }))
    }

    /// A user message typed by a person (not a tool result).
    pub fn is_prompt(&self) -> bool {
        self.role == Role::User && !self.is_tool_result() && !self.blocks.is_empty()
    }
}

/// `ceil(chars / 4)` over the serialized blocks of one message.
pub fn char_estimate(message: &Message) -> u64 {
    let chars: usize = message.blocks.iter().map(ContentBlock::serialized_chars).sum();
    chars.div_ceil(4) as u64
}

/// Context size as the next model call would see it.
///
/// Reads the most recent assistant `usage` and adds character estimates for
/// everything after it. Savings from snip are not visible through `usage`, so
/// they are subtracted explicitly.
pub fn estimate_context_tokens(messages: &[Message], snip_tokens_freed: u64) -> u64 {
    let last_with_usage = messages
        .iter()
        .rposition(|m| m.role == Role::Assistant && m.usage.is_some());
    match last_with_usage {
        Some(idx) => {
            let base = messages[idx].usage.map(|u| u.input_tokens).unwrap_or(0);
            let tail: u64 = messages[idx + 1..].iter().map(char_estimate).sum();
            (base + tail).saturating_sub(snip_tokens_freed)
        }
        None => messages.iter().map(char_estimate).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainViolation {
    pub offending: Vec<String>,
}

impl std::fmt::Display for ChainViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "chain violation at {}", self.offending.join(", "))
    }
}

impl std::error::Error for ChainViolation {}

/// Ok iff uuids are unique and every parent points at an earlier message.
pub fn validate_chain(messages: &[Message]) -> Result<(), ChainViolation> {
    let mut seen: HashSet<&str> = HashSet::new();
    let mut offending = Vec::new();
    for m in messages {
        let parent_ok = match &m.parent_uuid {
            None => true,
            Some(p) => seen.contains(p.as_str()),
        };
        let fresh = seen.insert(m.uuid.as_str());
        if !parent_ok || !fresh {
            offending.push(m.uuid.clone());
        }
    }
    if offending.is_empty() {
        Ok(())
    } else {
        Err(ChainViolation { offending })
    }
}

/// A non-fatal problem surfaced to the user instead of aborting the turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub source: String,
    pub message: String,
}

impl Notification {
    pub fn new(source: impl Into<String>, message: impl Into<String>) -> Self {
        Notification {
            source: source.into(),
            message: message.into(),
        }
    }
}

// ---------------------------------------------------------------------------
// Transcript events

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct MessageBody {
    pub role: Role,
    pub content: Vec<ContentBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub is_sidechain: bool,
}

/// Session-level metadata lines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SessionMeta {
    /// First line of a fresh session; pins the project directory.
    Start {
        project_dir: PathBuf,
        #[serde(default, skip_serializing_if = "is_false")]
        sidechain: bool,
    },
    /// First line of a forked session.
    Fork {
        project_dir: PathBuf,
        source_session: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at_uuid: Option<String>,
    },
    /// A context-collapse range committed to the collapse store.
    Collapse {
        from_uuid: String,
        to_uuid: String,
        summary_text: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventPayload {
    Message(MessageBody),
    CompactBoundary(CompactionBoundary),
    FileHistorySnapshot(FileCheckpoint),
    ContentReplacement(ContentReplacement),
    SessionMeta(SessionMeta),
}

/// One durable line of a session log.
#[derive(Debug, Clone, PartialEq)]
pub struct TranscriptEvent {
    pub uuid: String,
    pub parent_uuid: Option<String>,
    pub timestamp: DateTime<Utc>,
    pub session_id: String,
    pub payload: EventPayload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Message,
    CompactBoundary,
    FileHistorySnapshot,
    ContentReplacement,
    SessionMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
struct WireEvent {
    #[serde(rename = "type")]
    kind: EventKind,
    uuid: String,
    parent_uuid: Option<String>,
    timestamp: DateTime<Utc>,
    session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    message: Option<MessageBody>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boundary: Option<CompactionBoundary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snapshot: Option<FileCheckpoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    replacement: Option<ContentReplacement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<SessionMeta>,
}

impl TranscriptEvent {
    pub fn from_message(session_id: &str, m: &Message) -> Self {
        TranscriptEvent {
            uuid: m.uuid.clone(),
            parent_uuid: m.parent_uuid.clone(),
            timestamp: m.timestamp,
            session_id: session_id.to_string(),
            payload: EventPayload::Message(MessageBody {
                role: m.role,
                content: m.blocks.clone(),
                usage: m.usage,
                is_sidechain: m.is_sidechain,
            }),
        }
    }

    pub fn new(session_id: &str, payload: EventPayload) -> Self {
        TranscriptEvent {
            uuid: new_id(),
            parent_uuid: None,
            timestamp: Utc::now(),
            session_id: session_id.to_string(),
            payload,
        }
    }

    pub fn kind(&self) -> EventKind {
        match &self.payload {
            EventPayload::Message(_) => EventKind::Message,
            EventPayload::CompactBoundary(_) => EventKind::CompactBoundary,
            EventPayload::FileHistorySnapshot(_) => EventKind::FileHistorySnapshot,
            EventPayload::ContentReplacement(_) => EventKind::ContentReplacement,
            EventPayload::SessionMeta(_) => EventKind::SessionMeta,
        }
    }

    pub fn to_message(&self) -> Option<Message> {
        match &self.payload {
            EventPayload::Message(body) => Some(Message {
                uuid: self.uuid.clone(),
                parent_uuid: self.parent_uuid.clone(),
                role: body.role,
                blocks: body.content.clone(),
                timestamp: self.timestamp,
                usage: body.usage,
                is_sidechain: body.is_sidechain,
            }),
            _ => None,
        }
    }

    /// Canonical single-line JSON (no trailing newline).
    pub fn to_line(&self) -> String {
        let mut wire = WireEvent {
            kind: self.kind(),
            uuid: self.uuid.clone(),
            parent_uuid: self.parent_uuid.clone(),
            timestamp: self.timestamp,
            session_id: self.session_id.clone(),
            message: None,
            boundary: None,
            snapshot: None,
            replacement: None,
            meta: None,
        };
        match &self.payload {
            EventPayload::Message(b) => wire.message = Some(b.clone()),
            EventPayload::CompactBoundary(b) => wire.boundary = Some(b.clone()),
            EventPayload::FileHistorySnapshot(s) => wire.snapshot = Some(s.clone()),
            EventPayload::ContentReplacement(r) => wire.replacement = Some(r.clone()),
            EventPayload::SessionMeta(m) => wire.meta = Some(m.clone()),
        }
        // serde_json escapes control characters, so the output never holds a raw newline.
        serde_json::to_string(&wire).expect("transcript events always serialize")
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let wire: WireEvent = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let present = usize::from(wire.message.is_some())
            + usize::from(wire.boundary.is_some())
            + usize::from(wire.snapshot.is_some())
            + usize::from(wire.replacement.is_some())
            + usize::from(wire.meta.is_some());
        if present != 1 {
            return Err(format!("expected exactly one payload object, found {present}"));
        }
        let payload = match wire.kind {
            EventKind::Message => wire.message.map(EventPayload::Message),
            EventKind::CompactBoundary => wire.boundary.map(EventPayload::CompactBoundary),
            EventKind::FileHistorySnapshot => wire.snapshot.map(EventPayload::FileHistorySnapshot),
            EventKind::ContentReplacement => wire.replacement.map(EventPayload::ContentReplacement),
            EventKind::SessionMeta => wire.meta.map(EventPayload::SessionMeta),
        }
        .ok_or_else(|| format!("{:?} event without matching payload", wire.kind))?;
        Ok(TranscriptEvent {
            uuid: wire.uuid,
            parent_uuid: wire.parent_uuid,
            timestamp: wire.timestamp,
            session_id: wire.session_id,
            payload,
        })
    }
}

// ---------------------------------------------------------------------------
// Session state

/// Per-turn recovery bookkeeping. Reset when a turn starts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RecoveryCounters {
    pub output_token_escalations: u32,
    pub reactive_compact_attempted: bool,
    pub fallback_switched: bool,
}

/// Everything the loop mutates across iterations. Replaced as a whole at each
/// continue point.
#[derive(Debug, Clone, Default)]
pub struct TurnState {
    pub messages: Vec<Message>,
    pub tool_context: BTreeMap<String, Value>,
    pub compaction: CompactionTracking,
    pub recovery_counters: RecoveryCounters,
}

/// Session identity plus live turn state.
#[derive(Debug, Clone)]
pub struct SessionHandle {
    session_id: String,
    project_dir: PathBuf,
    pub mode: PermissionMode,
    pub state: TurnState,
}

impl SessionHandle {
    pub fn new(session_id: impl Into<String>, project_dir: impl Into<PathBuf>, mode: PermissionMode) -> Self {
        SessionHandle {
            session_id: session_id.into(),
            project_dir: project_dir.into(),
            mode,
            state: TurnState::default(),
        }
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn project_dir(&self) -> &std::path::Path {
        &self.project_dir
    }
}

//! The five pre-model context shapers and the boundary records that make
//! their effects replayable from an append-only transcript.

mod auto;
mod budget;
mod collapse;
mod microcompact;
mod pipeline;
mod snip;

use serde::{Deserialize, Serialize};

use crate::types::{Message, Role};

pub use auto::{annotate_boundary, auto_compact, kept_segment, AutoCompactOutcome, AutoCompactRequest, COMPACT_PROMPT};
pub use budget::{apply_tool_result_budget, budget_reference};
pub use collapse::{apply_collapses, collapse_summary_uuid};
pub use microcompact::{microcompact, MicrocompactInfo, MICROCOMPACT_PLACEHOLDER};
pub use pipeline::{run_shapers, PersistOp, ShaperContext, ShaperName, ShaperReport, TraceEntry};
pub use snip::{snip, split_turns, SnipResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    AutoCompact,
    Microcompact,
    Snip,
}

/// Payload of a `compact_boundary` event. The event's own uuid identifies the
/// boundary; for auto-compact and snip it is also the uuid of the in-memory
/// marker message that heads the live conversation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CompactionBoundary {
    pub kind: BoundaryKind,
    pub head_uuid: String,
    pub anchor_uuid: String,
    pub tail_uuid: String,
    pub tokens_freed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_uuid: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub is_sidechain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ContentReplacement {
    pub tool_use_id: String,
    pub original_size_chars: u64,
    pub reference: String,
    pub persisted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollapseEntry {
    pub from_uuid: String,
    pub to_uuid: String,
    pub summary_text: String,
}

/// Summaries of collapsed ranges. Lives beside the message list, never in it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollapseStore {
    pub entries: Vec<CollapseEntry>,
}

impl CollapseStore {
    pub fn push(&mut self, entry: CollapseEntry) {
        self.entries.push(entry);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Compaction bookkeeping carried in the turn state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CompactionTracking {
    /// Tokens removed by snip since the last usage-bearing assistant message.
    pub snip_tokens_freed: u64,
    pub auto_compactions: u32,
    pub last_trace: Vec<TraceEntry>,
}

/// A boundary marker: system role, no blocks, so it costs nothing in the estimate.
pub fn marker_message(uuid: &str, is_sidechain: bool) -> Message {
    let mut m = Message::new(Role::System, Vec::new());
    m.uuid = uuid.to_string();
    m.is_sidechain = is_sidechain;
    m
}

pub fn is_marker(m: &Message) -> bool {
    m.role == Role::System && m.blocks.is_empty()
}

/// Messages from the most recent boundary marker onwards.
pub fn messages_after_compact_boundary(messages: &[Message]) -> &[Message] {
    match messages.iter().rposition(is_marker) {
        Some(i) => &messages[i..],
        None => messages,
    }
}

/// Re-point `parent_uuid` of the first message at `parent` and chain the rest.
pub(crate) fn relink_head(kept: &mut [Message], parent: &str) {
    if let Some(first) = kept.first_mut() {
        first.parent_uuid = Some(parent.to_string());
    }
}

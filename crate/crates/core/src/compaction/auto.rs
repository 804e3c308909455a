use std::collections::HashSet;

use serde_json::{json, Value};

use super::{marker_message, relink_head, BoundaryKind, CompactionBoundary};
use crate::hooks::{HookEvent, HookRegistry};
use crate::model::Summarizer;
use crate::types::{new_id, Message, Notification, Role};

/// Default compaction instructions; PreCompact hook context is appended.
pub const COMPACT_PROMPT: &str = include_str!("../../test-data/compact_prompt.md");

pub struct AutoCompactRequest<'a> {
    /// The conversation as the model would see it (after collapse projection).
    pub view: &'a [Message],
    /// The underlying history; the kept tail is taken from here.
    pub history: &'a [Message],
    pub summarizer: &'a dyn Summarizer,
    pub hooks: &'a HookRegistry,
    /// Base hook payload (session id, cwd).
    pub hook_payload: Value,
    pub attachments: Vec<Message>,
    pub compact_prompt: &'a str,
    /// `auto`, `reactive` or `manual`.
    pub trigger: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AutoCompactOutcome {
    Compacted {
        /// `[marker, summary, kept.., attachments.., hook results..]`
        messages: Vec<Message>,
        marker_uuid: String,
        boundary: CompactionBoundary,
        /// Messages new to the transcript: summary, attachments, hook results.
        new_messages: Vec<Message>,
        notifications: Vec<Notification>,
    },
    Failed(Vec<Notification>),
}

/// Messages after the last assistant message, minus tool results (their
/// tool_use is being summarized away).
pub fn kept_segment(history: &[Message]) -> Vec<Message> {
    let start = history
        .iter()
        .rposition(|m| m.role == Role::Assistant)
        .map(|i| i + 1)
        .unwrap_or(history.len());
    history[start..]
        .iter()
        .filter(|m| !m.is_tool_result() && m.role != Role::System)
        .cloned()
        .collect()
}

/// Fill head/anchor/tail from the kept segment. The anchor is the first kept
/// message whose parent is not itself kept.
pub fn annotate_boundary(mut boundary: CompactionBoundary, kept: &[Message], summary_uuid: &str) -> CompactionBoundary {
    match (kept.first(), kept.last()) {
        (Some(h), Some(t)) => {
            let ids: HashSet<&str> = kept.iter().map(|m| m.uuid.as_str()).collect();
            let anchor = kept
                .iter()
                .find(|m| m.parent_uuid.as_deref().is_none_or(|p| !ids.contains(p)))
                .unwrap_or(h);
            boundary.head_uuid = h.uuid.clone();
            boundary.anchor_uuid = anchor.uuid.clone();
            boundary.tail_uuid = t.uuid.clone();
        }
        _ => {
            boundary.head_uuid = summary_uuid.to_string();
            boundary.anchor_uuid = summary_uuid.to_string();
            boundary.tail_uuid = summary_uuid.to_string();
        }
    }
    boundary
}

fn payload_with(base: &Value, extra: Value) -> Value {
    let mut p = base.clone();
    if let (Value::Object(a), Value::Object(b)) = (&mut p, extra) {
        a.extend(b);
    }
    p
}

pub async fn auto_compact(req: AutoCompactRequest<'_>) -> AutoCompactOutcome {
    let mut notes = Vec::new();
    let kept = kept_segment(req.history);
    let kept_ids: HashSet<&str> = kept.iter().map(|m| m.uuid.as_str()).collect();
    let to_summarize: Vec<Message> = req.view.iter().filter(|m| !kept_ids.contains(m.uuid.as_str())).cloned().collect();
    if to_summarize.iter().all(|m| m.blocks.is_empty()) {
        notes.push(Notification::new("compact", "nothing to summarize"));
        return AutoCompactOutcome::Failed(notes);
    }

    let pre = req
        .hooks
        .fire(HookEvent::PreCompact, None, payload_with(&req.hook_payload, json!({"trigger": req.trigger})))
        .await;
    notes.extend(pre.notifications);
    let mut prompt = req.compact_prompt.to_string();
    if let Some(extra) = pre.additional_context {
        prompt.push_str("\n\n");
        prompt.push_str(&extra);
    }

    let summary_text = match req.summarizer.summarize(&to_summarize, &prompt).await {
        Ok(t) => t,
        Err(e) => {
            notes.push(Notification::new("compact", format!("summarizer failed: {e}")));
            return AutoCompactOutcome::Failed(notes);
        }
    };

    let is_sidechain = req.view.first().is_some_and(|m| m.is_sidechain);
    let marker_uuid = new_id();
    let mut summary = Message::user_text(summary_text.clone()).with_parent(Some(marker_uuid.clone()));
    summary.is_sidechain = is_sidechain;

    let mut kept = kept;
    relink_head(&mut kept, &summary.uuid);
    let boundary = annotate_boundary(
        CompactionBoundary {
            kind: BoundaryKind::AutoCompact,
            head_uuid: String::new(),
            anchor_uuid: String::new(),
            tail_uuid: String::new(),
            tokens_freed: 0,
            summary_uuid: Some(summary.uuid.clone()),
            is_sidechain,
        },
        &kept,
        &summary.uuid,
    );

    let mut messages = vec![marker_message(&marker_uuid, is_sidechain), summary.clone()];
    messages.extend(kept);
    let mut new_messages = vec![summary];

    let post = req
        .hooks
        .fire(
            HookEvent::PostCompact,
            None,
            payload_with(&req.hook_payload, json!({"trigger": req.trigger, "summary": summary_text})),
        )
        .await;
    notes.extend(post.notifications);
    let mut tail: Vec<Message> = req.attachments;
    if let Some(ctx) = post.additional_context {
        tail.push(Message::attachment(ctx));
    }
    for mut m in tail {
        m.parent_uuid = messages.last().map(|x| x.uuid.clone());
        m.is_sidechain = is_sidechain;
        new_messages.push(m.clone());
        messages.push(m);
    }

    AutoCompactOutcome::Compacted {
        messages,
        marker_uuid,
        boundary,
        new_messages,
        notifications: notes,
    }
}

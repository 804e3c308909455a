use serde::Serialize;
use serde_json::Value;

use super::{
    apply_collapses, apply_tool_result_budget, auto_compact, microcompact, snip, AutoCompactOutcome,
    AutoCompactRequest, CollapseStore, CompactionBoundary, ContentReplacement,
};
use crate::config::CompactionConfig;
use crate::hooks::HookRegistry;
use crate::model::Summarizer;
use crate::types::{char_estimate, estimate_context_tokens, Message, Notification};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ShaperName {
    Budget,
    Snip,
    Microcompact,
    Collapse,
    AutoCompact,
}

impl ShaperName {
    pub const ORDER: [ShaperName; 5] = [
        ShaperName::Budget,
        ShaperName::Snip,
        ShaperName::Microcompact,
        ShaperName::Collapse,
        ShaperName::AutoCompact,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub shaper: ShaperName,
    pub enabled: bool,
    pub applied: bool,
    pub tokens_before: u64,
    pub tokens_after: u64,
}

/// Something the session writer must append.
#[derive(Debug, Clone, PartialEq)]
pub enum PersistOp {
    Replacement(ContentReplacement),
    Boundary { uuid: String, boundary: CompactionBoundary },
    Message(Message),
}

pub struct ShaperContext<'a> {
    pub cfg: &'a CompactionConfig,
    /// Result cap by tool name; `None` is uncapped.
    pub caps: &'a (dyn Fn(&str) -> Option<usize> + Send + Sync),
    pub collapse_store: &'a CollapseStore,
    pub summarizer: &'a dyn Summarizer,
    pub hooks: &'a HookRegistry,
    pub hook_payload: Value,
    pub attachments: Vec<Message>,
    pub compact_prompt: &'a str,
    /// Snip savings not yet reflected in any usage figure.
    pub snip_tokens_freed: u64,
    /// Compact regardless of the threshold (reactive recovery).
    pub force_compact: bool,
    pub trigger: &'a str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShaperReport {
    /// New underlying history.
    pub history: Vec<Message>,
    /// What the model sees: history with collapses projected.
    pub view: Vec<Message>,
    pub persist: Vec<PersistOp>,
    pub trace: Vec<TraceEntry>,
    pub notifications: Vec<Notification>,
    pub snip_tokens_freed: u64,
    pub auto_compacted: bool,
    pub tokens_before: u64,
    pub tokens_after: u64,
}

/// Budget, snip, microcompact, collapse, auto-compact: always in that order.
/// A stage that would raise the estimate is reverted.
pub async fn run_shapers(messages: Vec<Message>, ctx: ShaperContext<'_>) -> ShaperReport {
    let cfg = ctx.cfg;
    let mut snip_freed = ctx.snip_tokens_freed;
    let tokens_before = estimate_context_tokens(&messages, snip_freed);
    let mut history = messages;
    let mut persist = Vec::new();
    let mut trace = Vec::new();
    let mut notes = Vec::new();

    let revert_note = |name: ShaperName| Notification::new("compact", format!("{name:?} reverted: estimate would grow"));

    // 1. Budget (always on).
    {
        let before = estimate_context_tokens(&history, snip_freed);
        let (next, reps) = apply_tool_result_budget(&history, ctx.caps);
        let after = estimate_context_tokens(&next, snip_freed);
        let applied = !reps.is_empty() && after <= before;
        if applied {
            history = next;
            persist.extend(reps.into_iter().map(PersistOp::Replacement));
        } else if !reps.is_empty() {
            notes.push(revert_note(ShaperName::Budget));
        }
        trace.push(TraceEntry {
            shaper: ShaperName::Budget,
            enabled: true,
            applied,
            tokens_before: before,
            tokens_after: estimate_context_tokens(&history, snip_freed),
        });
    }

    // 2. Snip.
    {
        let before = estimate_context_tokens(&history, snip_freed);
        let mut applied = false;
        if cfg.snip_enabled {
            let r = snip(&history, cfg.snip_retention_turns);
            if let Some((uuid, boundary)) = r.boundary {
                let after = estimate_context_tokens(&r.messages, snip_freed + r.tokens_freed);
                if after <= before {
                    history = r.messages;
                    snip_freed += r.tokens_freed;
                    persist.push(PersistOp::Boundary { uuid, boundary });
                    applied = true;
                } else {
                    notes.push(revert_note(ShaperName::Snip));
                }
            }
        }
        trace.push(TraceEntry {
            shaper: ShaperName::Snip,
            enabled: cfg.snip_enabled,
            applied,
            tokens_before: before,
            tokens_after: estimate_context_tokens(&history, snip_freed),
        });
    }

    // 3. Microcompact.
    {
        let before = estimate_context_tokens(&history, snip_freed);
        let mut applied = false;
        if cfg.microcompact_enabled {
            let (next, info) = microcompact(&history, cfg.microcompact_age_turns);
            if let Some(boundary) = info.boundary {
                if estimate_context_tokens(&next, snip_freed) <= before {
                    history = next;
                    persist.extend(info.replacements.into_iter().map(PersistOp::Replacement));
                    persist.push(PersistOp::Boundary {
                        uuid: crate::types::new_id(),
                        boundary,
                    });
                    applied = true;
                } else {
                    notes.push(revert_note(ShaperName::Microcompact));
                }
            }
        }
        trace.push(TraceEntry {
            shaper: ShaperName::Microcompact,
            enabled: cfg.microcompact_enabled,
            applied,
            tokens_before: before,
            tokens_after: estimate_context_tokens(&history, snip_freed),
        });
    }

    // 4. Collapse projection (view only).
    let mut view = history.clone();
    {
        let before = estimate_context_tokens(&view, snip_freed);
        let mut applied = false;
        if cfg.collapse_enabled && !ctx.collapse_store.is_empty() {
            let (projected, n) = apply_collapses(&history, ctx.collapse_store);
            notes.extend(n);
            if projected != view {
                if estimate_context_tokens(&projected, snip_freed) <= before {
                    view = projected;
                    applied = true;
                } else {
                    notes.push(revert_note(ShaperName::Collapse));
                }
            }
        }
        trace.push(TraceEntry {
            shaper: ShaperName::Collapse,
            enabled: cfg.collapse_enabled,
            applied,
            tokens_before: before,
            tokens_after: estimate_context_tokens(&view, snip_freed),
        });
    }

    // 5. Auto-compact.
    let before = estimate_context_tokens(&view, snip_freed);
    let over = before as f64 > cfg.threshold_tokens();
    let mut applied = false;
    if cfg.autocompact_enabled && (over || ctx.force_compact) && view.iter().any(|m| !m.blocks.is_empty()) {
        let out = auto_compact(AutoCompactRequest {
            view: &view,
            history: &history,
            summarizer: ctx.summarizer,
            hooks: ctx.hooks,
            hook_payload: ctx.hook_payload.clone(),
            attachments: ctx.attachments.clone(),
            compact_prompt: ctx.compact_prompt,
            trigger: ctx.trigger,
        })
        .await;
        match out {
            AutoCompactOutcome::Compacted {
                messages,
                marker_uuid,
                mut boundary,
                new_messages,
                notifications,
            } => {
                notes.extend(notifications);
                // The compacted list carries no usage, so its estimate is a plain recount.
                let after: u64 = messages.iter().map(char_estimate).sum();
                if after < before {
                    boundary.tokens_freed = before - after;
                    persist.push(PersistOp::Boundary {
                        uuid: marker_uuid,
                        boundary,
                    });
                    persist.extend(new_messages.into_iter().map(PersistOp::Message));
                    history = messages;
                    view = history.clone();
                    snip_freed = 0;
                    applied = true;
                } else {
                    notes.push(Notification::new("compact", "auto-compact did not reduce the context; discarded"));
                }
            }
            AutoCompactOutcome::Failed(n) => notes.extend(n),
        }
    }
    let tokens_after = estimate_context_tokens(&view, snip_freed);
    trace.push(TraceEntry {
        shaper: ShaperName::AutoCompact,
        enabled: cfg.autocompact_enabled,
        applied,
        tokens_before: before,
        tokens_after,
    });

    ShaperReport {
        history,
        view,
        persist,
        trace,
        notifications: notes,
        snip_tokens_freed: snip_freed,
        auto_compacted: applied,
        tokens_before,
        tokens_after,
    }
}

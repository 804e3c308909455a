use super::{marker_message, relink_head, BoundaryKind, CompactionBoundary};
use crate::types::{char_estimate, new_id, Message};

#[derive(Debug, Clone, PartialEq)]
pub struct SnipResult {
    pub messages: Vec<Message>,
    pub tokens_freed: u64,
    /// Marker uuid (also the boundary event uuid) and the boundary record.
    pub boundary: Option<(String, CompactionBoundary)>,
}

/// Turn start indices: every typed prompt opens a turn; anything before the
/// first prompt forms a leading turn of its own.
pub fn split_turns(messages: &[Message]) -> Vec<std::ops::Range<usize>> {
    let mut starts: Vec<usize> = messages
        .iter()
        .enumerate()
        .filter(|(_, m)| m.is_prompt())
        .map(|(i, _)| i)
        .collect();
    if starts.first() != Some(&0) && !messages.is_empty() {
        starts.insert(0, 0);
    }
    let mut out = Vec::with_capacity(starts.len());
    for (k, s) in starts.iter().enumerate() {
        let e = starts.get(k + 1).copied().unwrap_or(messages.len());
        out.push(*s..e);
    }
    out
}

/// Drop whole oldest turns so at most `retention` remain.
pub fn snip(messages: &[Message], retention: usize) -> SnipResult {
    let turns = split_turns(messages);
    if turns.len() <= retention {
        return SnipResult {
            messages: messages.to_vec(),
            tokens_freed: 0,
            boundary: None,
        };
    }
    let cut = if retention == 0 {
        messages.len()
    } else {
        turns[turns.len() - retention].start
    };
    let tokens_freed: u64 = messages[..cut].iter().map(char_estimate).sum();
    let is_sidechain = messages.first().is_some_and(|m| m.is_sidechain);
    let marker_uuid = new_id();
    let mut kept = messages[cut..].to_vec();
    relink_head(&mut kept, &marker_uuid);
    let (head, tail) = match (kept.first(), kept.last()) {
        (Some(h), Some(t)) => (h.uuid.clone(), t.uuid.clone()),
        _ => (marker_uuid.clone(), marker_uuid.clone()),
    };
    let boundary = CompactionBoundary {
        kind: BoundaryKind::Snip,
        head_uuid: head.clone(),
        anchor_uuid: head,
        tail_uuid: tail,
        tokens_freed,
        summary_uuid: None,
        is_sidechain,
    };
    let mut out = vec![marker_message(&marker_uuid, is_sidechain)];
    out.extend(kept);
    SnipResult {
        messages: out,
        tokens_freed,
        boundary: Some((marker_uuid, boundary)),
    }
}

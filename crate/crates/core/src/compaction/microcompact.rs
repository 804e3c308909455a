use std::collections::HashMap;

use super::{BoundaryKind, CompactionBoundary, ContentReplacement};
use crate::types::{char_estimate, ContentBlock, Message, Role};

pub const MICROCOMPACT_PLACEHOLDER: &str = "[Old tool result content cleared]";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MicrocompactInfo {
    pub cleared: Vec<String>,
    pub tokens_freed: u64,
    pub replacements: Vec<ContentReplacement>,
    pub boundary: Option<CompactionBoundary>,
}

/// Clear results whose tool_use is more than `age_threshold` assistant
/// messages old. Works from tool_use ids and positions only.
pub fn microcompact(messages: &[Message], age_threshold: usize) -> (Vec<Message>, MicrocompactInfo) {
    let mut assistants_after = vec![0usize; messages.len()];
    let mut seen = 0;
    for (i, m) in messages.iter().enumerate().rev() {
        assistants_after[i] = seen;
        if m.role == Role::Assistant {
            seen += 1;
        }
    }
    let age: HashMap<&str, usize> = messages
        .iter()
        .enumerate()
        .flat_map(|(i, m)| m.tool_uses().map(move |(id, _, _)| (id, i)))
        .map(|(id, i)| (id, assistants_after[i]))
        .collect();

    let mut out = messages.to_vec();
    let mut info = MicrocompactInfo::default();
    let placeholder_len = MICROCOMPACT_PLACEHOLDER.chars().count();
    let mut touched: Vec<usize> = Vec::new();
    for (i, m) in out.iter_mut().enumerate() {
        let before = char_estimate(m);
        let mut changed = false;
        for b in m.blocks.iter_mut() {
            let ContentBlock::ToolResult { tool_use_id, content, .. } = b else { continue };
            let Some(&a) = age.get(tool_use_id.as_str()) else { continue };
            if a <= age_threshold || content.chars().count() <= placeholder_len {
                continue;
            }
            info.replacements.push(ContentReplacement {
                tool_use_id: tool_use_id.clone(),
                original_size_chars: content.chars().count() as u64,
                reference: MICROCOMPACT_PLACEHOLDER.to_string(),
                persisted: true,
            });
            info.cleared.push(tool_use_id.clone());
            *content = MICROCOMPACT_PLACEHOLDER.to_string();
            changed = true;
        }
        if changed {
            info.tokens_freed += before.saturating_sub(char_estimate(m));
            touched.push(i);
        }
    }
    if let (Some(&first), Some(&last)) = (touched.first(), touched.last()) {
        info.boundary = Some(CompactionBoundary {
            kind: BoundaryKind::Microcompact,
            head_uuid: out[first].uuid.clone(),
            anchor_uuid: out[first].uuid.clone(),
            tail_uuid: out[last].uuid.clone(),
            tokens_freed: info.tokens_freed,
            summary_uuid: None,
            is_sidechain: out[first].is_sidechain,
        });
    }
    (out, info)
}

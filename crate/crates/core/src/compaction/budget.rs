use std::collections::HashMap;

use super::ContentReplacement;
use crate::types::{ContentBlock, Message};

const PREVIEW_CHARS: usize = 200;

/// The string that stands in for an oversized result.
pub fn budget_reference(tool_use_id: &str, content: &str) -> String {
    let total = content.chars().count();
    let preview: String = content.chars().take(PREVIEW_CHARS).collect();
    format!("[tool result {tool_use_id} replaced: {total} chars; preview follows]\n{preview}\n[... truncated]")
}

/// Replace every tool result longer than its tool's cap. `cap_for` receives
/// the tool name (empty when the tool_use is no longer in view) and returns
/// `None` for uncapped tools.
pub fn apply_tool_result_budget(
    messages: &[Message],
    cap_for: &dyn Fn(&str) -> Option<usize>,
) -> (Vec<Message>, Vec<ContentReplacement>) {
    let names: HashMap<&str, &str> = messages.iter().flat_map(|m| m.tool_uses().map(|(id, n, _)| (id, n))).collect();
    let mut out = messages.to_vec();
    let mut replacements = Vec::new();
    for m in out.iter_mut() {
        for b in m.blocks.iter_mut() {
            let ContentBlock::ToolResult { tool_use_id, content, .. } = b else { continue };
            let name = names.get(tool_use_id.as_str()).copied().unwrap_or("");
            let Some(cap) = cap_for(name) else { continue };
            let len = content.chars().count();
            if len <= cap {
                continue;
            }
            let reference = budget_reference(tool_use_id, content);
            if reference.chars().count() >= len {
                continue;
            }
            replacements.push(ContentReplacement {
                tool_use_id: tool_use_id.clone(),
                original_size_chars: len as u64,
                reference: reference.clone(),
                persisted: true,
            });
            *content = reference;
        }
    }
    (out, replacements)
}

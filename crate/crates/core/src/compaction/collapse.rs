use std::collections::HashMap;

use super::CollapseStore;
use crate::types::{char_estimate, Message, Notification, Role};

/// Stable uuid of the projected summary for a range starting at `from_uuid`.
pub fn collapse_summary_uuid(from_uuid: &str) -> String {
    format!("collapse-{from_uuid}")
}

/// Read-time projection: each stored range becomes one summary message. The
/// input history is never modified.
pub fn apply_collapses(history: &[Message], store: &CollapseStore) -> (Vec<Message>, Vec<Notification>) {
    let index: HashMap<&str, usize> = history.iter().enumerate().map(|(i, m)| (m.uuid.as_str(), i)).collect();
    let mut notes = Vec::new();
    // start index -> (end index, summary text)
    let mut ranges: Vec<(usize, usize, &str, &str)> = Vec::new();
    for e in &store.entries {
        let (Some(&a), Some(&b)) = (index.get(e.from_uuid.as_str()), index.get(e.to_uuid.as_str())) else {
            notes.push(Notification::new(
                "collapse",
                format!("collapse {}..{} skipped: range not in history", e.from_uuid, e.to_uuid),
            ));
            continue;
        };
        if a > b || ranges.iter().any(|(s, t, _, _)| a <= *t && *s <= b) {
            notes.push(Notification::new(
                "collapse",
                format!("collapse {}..{} skipped: invalid or overlapping range", e.from_uuid, e.to_uuid),
            ));
            continue;
        }
        ranges.push((a, b, e.from_uuid.as_str(), e.summary_text.as_str()));
    }
    if ranges.is_empty() {
        return (history.to_vec(), notes);
    }
    ranges.sort_by_key(|r| r.0);

    let mut out = Vec::with_capacity(history.len());
    let mut remap: HashMap<&str, String> = HashMap::new();
    let mut i = 0;
    let mut r = ranges.iter().peekable();
    while i < history.len() {
        if let Some(&&(a, b, from, text)) = r.peek() {
            if i == a {
                r.next();
                let first = &history[a];
                let mut summary = Message::user_text(format!("[collapsed summary]\n{text}"));
                summary.uuid = collapse_summary_uuid(from);
                summary.timestamp = first.timestamp;
                summary.is_sidechain = first.is_sidechain;
                summary.role = Role::User;
                summary.parent_uuid = first
                    .parent_uuid
                    .as_deref()
                    .map(|p| remap.get(p).cloned().unwrap_or_else(|| p.to_string()));
                let covered: u64 = history[a..=b].iter().map(char_estimate).sum();
                if char_estimate(&summary) >= covered {
                    // Not smaller than what it replaces; keep the originals.
                    notes.push(Notification::new("collapse", format!("collapse at {from} skipped: summary not smaller")));
                    for m in &history[a..=b] {
                        out.push(relinked(m, &remap));
                    }
                } else {
                    for m in &history[a..=b] {
                        remap.insert(m.uuid.as_str(), summary.uuid.clone());
                    }
                    out.push(summary);
                }
                i = b + 1;
                continue;
            }
        }
        out.push(relinked(&history[i], &remap));
        i += 1;
    }
    (out, notes)
}

fn relinked(m: &Message, remap: &HashMap<&str, String>) -> Message {
    let mut m = m.clone();
    if let Some(p) = m.parent_uuid.as_deref() {
        if let Some(new) = remap.get(p) {
            m.parent_uuid = Some(new.clone());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compaction::CollapseEntry;
    use crate::types::validate_chain;

    fn chain(n: usize) -> Vec<Message> {
        let mut out: Vec<Message> = Vec::new();
        for i in 0..n {
            let parent = out.last().map(|m| m.uuid.clone());
            out.push(Message::user_text(format!("message number {i} with some padding text")).with_parent(parent));
        }
        out
    }

    #[test]
    fn empty_store_is_identity() {
        let h = chain(5);
        let (p, n) = apply_collapses(&h, &CollapseStore::default());
        assert_eq!(p, h);
        assert!(n.is_empty());
    }

    #[test]
    fn range_replaced_history_untouched() {
        let h = chain(10);
        let snapshot = h.clone();
        let store = CollapseStore {
            entries: vec![CollapseEntry {
                from_uuid: h[3].uuid.clone(),
                to_uuid: h[7].uuid.clone(),
                summary_text: "S".into(),
            }],
        };
        let (p, n) = apply_collapses(&h, &store);
        assert!(n.is_empty());
        assert_eq!(p.len(), 6);
        assert_eq!(p[3].uuid, collapse_summary_uuid(&h[3].uuid));
        assert!(p[3].text().contains('S'));
        assert_eq!(p[4].uuid, h[8].uuid);
        validate_chain(&p).unwrap();
        assert_eq!(h, snapshot);
        // Deterministic.
        assert_eq!(apply_collapses(&h, &store).0, p);
    }

    #[test]
    fn missing_and_overlapping_ranges_are_skipped() {
        let h = chain(10);
        let store = CollapseStore {
            entries: vec![
                CollapseEntry {
                    from_uuid: "nope".into(),
                    to_uuid: h[2].uuid.clone(),
                    summary_text: "x".into(),
                },
                CollapseEntry {
                    from_uuid: h[1].uuid.clone(),
                    to_uuid: h[4].uuid.clone(),
                    summary_text: "x".into(),
                },
                CollapseEntry {
                    from_uuid: h[3].uuid.clone(),
                    to_uuid: h[6].uuid.clone(),
                    summary_text: "x".into(),
                },
            ],
        };
        let (p, n) = apply_collapses(&h, &store);
        assert_eq!(n.len(), 2);
        assert_eq!(p.len(), 7);
    }
}

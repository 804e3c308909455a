use std::path::{Path, PathBuf};

use crate::compaction::{
    marker_message, relink_head, BoundaryKind, CollapseEntry, CollapseStore, CompactionBoundary, CompactionTracking,
    ContentReplacement,
};
use crate::error::{Error, Result};
use crate::persistence::{FileCheckpoint, SessionStore};
use crate::types::{new_id, ContentBlock, EventPayload, Message, Notification, Role, SessionMeta, TranscriptEvent};

/// A session rebuilt from its transcript. Session-scoped permission rules are
/// deliberately absent: they never reach disk.
#[derive(Debug, Clone, Default)]
pub struct LoadedSession {
    pub session_id: String,
    pub project_dir: Option<PathBuf>,
    pub messages: Vec<Message>,
    pub collapse_store: CollapseStore,
    pub replacements: Vec<ContentReplacement>,
    pub boundaries: Vec<(String, CompactionBoundary)>,
    pub checkpoints: Vec<FileCheckpoint>,
    pub tracking: CompactionTracking,
    pub notifications: Vec<Notification>,
    pub events: Vec<TranscriptEvent>,
}

/// Parse every newline-terminated line. An unterminated tail is what a crash
/// mid-write leaves behind, so it is dropped with a notification rather than failing.
pub fn read_events(path: &Path) -> Result<(Vec<TranscriptEvent>, Vec<Notification>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut events = Vec::new();
    let mut notes = Vec::new();
    let mut start = 0;
    let mut line_no = 0;
    while start < bytes.len() {
        let Some(rel) = bytes[start..].iter().position(|b| *b == b'\n') else {
            notes.push(Notification::new(
                "transcript",
                format!("ignored {} trailing bytes of an incomplete line", bytes.len() - start),
            ));
            break;
        };
        line_no += 1;
        let raw = &bytes[start..start + rel];
        start += rel + 1;
        if raw.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let text = std::str::from_utf8(raw).map_err(|e| Error::Transcript {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let ev = TranscriptEvent::parse_line(text).map_err(|message| Error::Transcript {
            path: path.to_path_buf(),
            line: line_no,
            message,
        })?;
        events.push(ev);
    }
    Ok((events, notes))
}

/// Replay events into the live conversation, applying the boundary patch rule:
/// preserved messages keep their on-disk parent, and the loader re-links the
/// head of each kept segment to the summary (or the marker when there is none).
pub fn replay(events: Vec<TranscriptEvent>) -> LoadedSession {
    let mut s = LoadedSession::default();
    let mut live: Vec<Message> = Vec::new();
    // Kept segment waiting for its summary message: (summary uuid, kept).
    let mut pending: Option<(String, Vec<Message>)> = None;

    for ev in &events {
        if s.session_id.is_empty() {
            s.session_id = ev.session_id.clone();
        }
        match &ev.payload {
            EventPayload::Message(_) => {
                let mut m = ev.to_message().expect("message payload");
                if m.role == Role::Assistant && m.usage.is_some() {
                    s.tracking.snip_tokens_freed = 0;
                }
                let resolves = pending.as_ref().is_some_and(|(sum, _)| *sum == m.uuid);
                if resolves {
                    let (_, mut kept) = pending.take().unwrap();
                    if m.parent_uuid.is_none() {
                        m.parent_uuid = live.last().map(|x| x.uuid.clone());
                    }
                    relink_head(&mut kept, &m.uuid);
                    live.push(m);
                    live.extend(kept);
                } else {
                    flush_pending(&mut pending, &mut live);
                    live.push(m);
                }
            }
            EventPayload::CompactBoundary(b) => {
                flush_pending(&mut pending, &mut live);
                let kept = segment(&live, &b.head_uuid, &b.tail_uuid);
                match b.kind {
                    BoundaryKind::AutoCompact => {
                        let kept: Vec<Message> =
                            kept.into_iter().filter(|m| !m.is_tool_result() && m.role != Role::System).collect();
                        live = vec![marker_at(&ev.uuid, ev.timestamp, b.is_sidechain)];
                        s.collapse_store.clear();
                        s.tracking.auto_compactions += 1;
                        match &b.summary_uuid {
                            Some(sum) => pending = Some((sum.clone(), kept)),
                            None => {
                                let mut kept = kept;
                                relink_head(&mut kept, &ev.uuid);
                                live.extend(kept);
                            }
                        }
                    }
                    BoundaryKind::Snip => {
                        let mut kept = kept;
                        relink_head(&mut kept, &ev.uuid);
                        live = vec![marker_at(&ev.uuid, ev.timestamp, b.is_sidechain)];
                        live.extend(kept);
                        s.tracking.snip_tokens_freed += b.tokens_freed;
                    }
                    BoundaryKind::Microcompact => {}
                }
                s.boundaries.push((ev.uuid.clone(), b.clone()));
            }
            EventPayload::ContentReplacement(r) => {
                apply_replacement(&mut live, r);
                if let Some((_, kept)) = pending.as_mut() {
                    apply_replacement(kept, r);
                }
                s.replacements.push(r.clone());
            }
            EventPayload::FileHistorySnapshot(cp) => s.checkpoints.push(cp.clone()),
            EventPayload::SessionMeta(meta) => match meta {
                SessionMeta::Start { project_dir, .. } | SessionMeta::Fork { project_dir, .. } => {
                    if s.project_dir.is_none() {
                        s.project_dir = Some(project_dir.clone());
                    }
                }
                SessionMeta::Collapse {
                    from_uuid,
                    to_uuid,
                    summary_text,
                } => s.collapse_store.push(CollapseEntry {
                    from_uuid: from_uuid.clone(),
                    to_uuid: to_uuid.clone(),
                    summary_text: summary_text.clone(),
                }),
            },
        }
    }
    if pending.is_some() {
        s.notifications.push(Notification::new(
            "transcript",
            "compaction summary missing; kept segment linked to the boundary marker",
        ));
        flush_pending(&mut pending, &mut live);
    }
    s.messages = live;
    s.events = events;
    s
}

fn flush_pending(pending: &mut Option<(String, Vec<Message>)>, live: &mut Vec<Message>) {
    if let Some((_, mut kept)) = pending.take() {
        if let Some(marker) = live.last().map(|m| m.uuid.clone()) {
            relink_head(&mut kept, &marker);
        }
        live.extend(kept);
    }
}

fn segment(live: &[Message], head: &str, tail: &str) -> Vec<Message> {
    let Some(h) = live.iter().position(|m| m.uuid == head) else {
        return Vec::new();
    };
    let t = live[h..].iter().position(|m| m.uuid == tail).map(|i| h + i).unwrap_or(live.len() - 1);
    live[h..=t].to_vec()
}

fn apply_replacement(messages: &mut [Message], r: &ContentReplacement) {
    for m in messages.iter_mut() {
        for b in m.blocks.iter_mut() {
            if let ContentBlock::ToolResult { tool_use_id, content, .. } = b {
                if *tool_use_id == r.tool_use_id {
                    *content = r.reference.clone();
                }
            }
        }
    }
}

/// The in-memory marker carries its boundary event's timestamp.
fn marker_at(uuid: &str, ts: chrono::DateTime<chrono::Utc>, is_sidechain: bool) -> Message {
    let mut m = marker_message(uuid, is_sidechain);
    m.timestamp = ts;
    m
}

pub fn load_transcript(path: &Path) -> Result<LoadedSession> {
    let (events, notes) = read_events(path)?;
    let mut s = replay(events);
    if s.session_id.is_empty() {
        s.session_id = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    }
    s.notifications.splice(0..0, notes);
    Ok(s)
}

/// Locate `<projects_root>/*/<id>.jsonl`.
pub fn find_transcript(projects_root: &Path, session_id: &str) -> Result<PathBuf> {
    let name = format!("{session_id}.jsonl");
    let entries = match std::fs::read_dir(projects_root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::UnknownSession(session_id.to_string()))
        }
        Err(e) => return Err(Error::io(projects_root, e)),
    };
    let mut dirs: Vec<PathBuf> = entries.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs.into_iter()
        .map(|d| d.join(&name))
        .find(|p| p.is_file())
        .ok_or_else(|| Error::UnknownSession(session_id.to_string()))
}

pub fn load_session(session_id: &str, projects_root: &Path) -> Result<LoadedSession> {
    load_transcript(&find_transcript(projects_root, session_id)?)
}

/// Copy events up to and including `at_uuid` (or everything) into a new
/// session file beside the original. Returns the new id and its path.
pub fn fork_session(projects_root: &Path, session_id: &str, at_uuid: Option<&str>) -> Result<(String, PathBuf)> {
    let src = find_transcript(projects_root, session_id)?;
    let (events, _) = read_events(&src)?;
    let cut = match at_uuid {
        None => events.len(),
        Some(u) => {
            events
                .iter()
                .position(|e| e.uuid == u)
                .ok_or_else(|| Error::UnknownEvent {
                    session: session_id.to_string(),
                    uuid: u.to_string(),
                })?
                + 1
        }
    };
    let project_dir = events
        .iter()
        .find_map(|e| match &e.payload {
            EventPayload::SessionMeta(SessionMeta::Start { project_dir, .. })
            | EventPayload::SessionMeta(SessionMeta::Fork { project_dir, .. }) => Some(project_dir.clone()),
            _ => None,
        })
        .unwrap_or_default();
    let new_sid = new_id();
    let dst = src.with_file_name(format!("{new_sid}.jsonl"));
    let mut store = SessionStore::open(&dst, &new_sid)?;
    store.append(&TranscriptEvent::new(
        &new_sid,
        EventPayload::SessionMeta(SessionMeta::Fork {
            project_dir,
            source_session: session_id.to_string(),
            at_uuid: at_uuid.map(str::to_string),
        }),
    ))?;
    for ev in &events[..cut] {
        if matches!(
            ev.payload,
            EventPayload::SessionMeta(SessionMeta::Start { .. }) | EventPayload::SessionMeta(SessionMeta::Fork { .. })
        ) {
            continue;
        }
        let mut copy = ev.clone();
        copy.session_id = new_sid.clone();
        store.append(&copy)?;
    }
    Ok((new_sid, dst))
}

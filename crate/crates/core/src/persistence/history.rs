use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use fs4::fs_std::FileExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const CHUNK: u64 = 64 * 1024;

/// One submitted prompt in the global history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HistoryEntry {
    pub display: String,
    pub timestamp: DateTime<Utc>,
    pub project: PathBuf,
    pub session_id: String,
}

impl HistoryEntry {
    pub fn new(display: impl Into<String>, project: impl Into<PathBuf>, session_id: impl Into<String>) -> Self {
        HistoryEntry {
            display: display.into(),
            timestamp: Utc::now(),
            project: project.into(),
            session_id: session_id.into(),
        }
    }
}

/// Append under an exclusive advisory lock so concurrent sessions interleave whole lines.
pub fn append_history(path: &Path, entry: &HistoryEntry) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock_exclusive().map_err(|e| Error::io(path, e))?;
    let mut line = serde_json::to_string(entry)?;
    line.push('\n');
    let res = file.write_all(line.as_bytes()).and_then(|_| file.flush());
    let _ = FileExt::unlock(&file);
    res.map_err(|e| Error::io(path, e))
}

/// Newest first, at most `limit`, reading the file backwards in chunks.
pub fn read_history_reverse(path: &Path, limit: usize) -> Result<Vec<HistoryEntry>> {
    let mut out = Vec::new();
    if limit == 0 {
        return Ok(out);
    }
    let mut file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut pos = file.metadata().map_err(|e| Error::io(path, e))?.len();
    // Bytes of the (possibly incomplete) line that starts before the current chunk.
    let mut carry: Vec<u8> = Vec::new();
    while pos > 0 && out.len() < limit {
        let start = pos.saturating_sub(CHUNK);
        let mut chunk = vec![0u8; (pos - start) as usize];
        file.seek(SeekFrom::Start(start)).map_err(|e| Error::io(path, e))?;
        file.read_exact(&mut chunk).map_err(|e| Error::io(path, e))?;
        chunk.extend_from_slice(&carry);
        pos = start;
        let mut end = chunk.len();
        while let Some(nl) = chunk[..end].iter().rposition(|b| *b == b'\n') {
            push_line(&chunk[nl + 1..end], &mut out);
            if out.len() >= limit {
                return Ok(out);
            }
            end = nl;
        }
        carry = chunk[..end].to_vec();
    }
    if out.len() < limit {
        push_line(&carry, &mut out);
    }
    Ok(out)
}

fn push_line(bytes: &[u8], out: &mut Vec<HistoryEntry>) {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return;
    }
    if let Ok(entry) = serde_json::from_slice(bytes) {
        out.push(entry);
    }
}

/// Oldest first; used as the oracle for the reverse reader.
pub fn read_history_forward(path: &Path) -> Result<Vec<HistoryEntry>> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::io(path, e)),
    };
    Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(s: &str) -> HistoryEntry {
        HistoryEntry::new(s, "/repo", "s")
    }

    #[test]
    fn reverse_returns_newest_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.jsonl");
        for s in ["p1", "p2", "p3"] {
            append_history(&p, &entry(s)).unwrap();
        }
        let got: Vec<_> = read_history_reverse(&p, 2).unwrap().into_iter().map(|e| e.display).collect();
        assert_eq!(got, vec!["p3", "p2"]);
        assert!(read_history_reverse(&p, 0).unwrap().is_empty());
        assert!(read_history_reverse(&dir.path().join("missing"), 5).unwrap().is_empty());
    }

    #[test]
    fn reverse_matches_forward_across_chunks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("history.jsonl");
        for i in 0..3000 {
            append_history(&p, &entry(&format!("prompt {i} {}", "x".repeat(i % 97)))).unwrap();
        }
        let mut forward = read_history_forward(&p).unwrap();
        forward.reverse();
        assert_eq!(read_history_reverse(&p, usize::MAX).unwrap(), forward);
    }
}

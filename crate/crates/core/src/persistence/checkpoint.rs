use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-mutation copy of one file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct FileCheckpoint {
    pub session_id: String,
    pub original_path: PathBuf,
    pub snapshot_path: PathBuf,
    /// False when the file did not exist; rewinding then deletes it.
    pub existed: bool,
    pub sequence: u64,
    pub timestamp: DateTime<Utc>,
}

/// Copy `path` (or record its absence) under `<root>/<session_id>/`.
pub fn file_checkpoint(root: &Path, session_id: &str, path: &Path, sequence: u64) -> Result<FileCheckpoint> {
    let dir = root.join(session_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let snapshot_path = dir.join(format!("{sequence:06}-{name}"));
    let existed = path.is_file();
    if existed {
        std::fs::copy(path, &snapshot_path).map_err(|e| Error::io(path, e))?;
    }
    Ok(FileCheckpoint {
        session_id: session_id.to_string(),
        original_path: path.to_path_buf(),
        snapshot_path,
        existed,
        sequence,
        timestamp: Utc::now(),
    })
}

/// Restore newest-to-oldest every checkpoint with `sequence >= to_sequence`
/// (`None` rewinds everything). Returns the restored paths in restore order.
pub fn rewind_files(checkpoints: &[FileCheckpoint], to_sequence: Option<u64>) -> Result<Vec<PathBuf>> {
    let floor = to_sequence.unwrap_or(0);
    let mut selected: Vec<&FileCheckpoint> = checkpoints.iter().filter(|c| c.sequence >= floor).collect();
    selected.sort_by_key(|c| std::cmp::Reverse(c.sequence));
    let mut restored = Vec::new();
    for cp in selected {
        if cp.existed {
            if let Some(parent) = cp.original_path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::copy(&cp.snapshot_path, &cp.original_path).map_err(|e| Error::io(&cp.snapshot_path, e))?;
        } else if cp.original_path.exists() {
            std::fs::remove_file(&cp.original_path).map_err(|e| Error::io(&cp.original_path, e))?;
        }
        restored.push(cp.original_path.clone());
    }
    Ok(restored)
}

/// Hands out sequence numbers for one session.
#[derive(Debug)]
pub struct Checkpointer {
    root: PathBuf,
    session_id: String,
    next: AtomicU64,
}

impl Checkpointer {
    pub fn new(root: impl Into<PathBuf>, session_id: impl Into<String>, next_sequence: u64) -> Self {
        Checkpointer {
            root: root.into(),
            session_id: session_id.into(),
            next: AtomicU64::new(next_sequence),
        }
    }

    pub fn checkpoint(&self, path: &Path) -> Result<FileCheckpoint> {
        let seq = self.next.fetch_add(1, Ordering::SeqCst);
        file_checkpoint(&self.root, &self.session_id, path, seq)
    }
}

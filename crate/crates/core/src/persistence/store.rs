use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::HarnessPaths;
use crate::error::{Error, Result};
use crate::types::TranscriptEvent;

/// `<projects_root>/<encoded project dir>/<session id>.jsonl`
pub fn transcript_path(paths: &HarnessPaths, project_dir: &Path, session_id: &str) -> PathBuf {
    paths.project_dir_for(project_dir).join(format!("{session_id}.jsonl"))
}

/// Single writer for one session file. Every append is one whole line written
/// with a single `write_all` on an append-mode handle.
#[derive(Debug)]
pub struct SessionStore {
    session_id: String,
    path: PathBuf,
    file: File,
    bytes_written: u64,
}

impl SessionStore {
    pub fn open(path: impl Into<PathBuf>, session_id: impl Into<String>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(SessionStore {
            session_id: session_id.into(),
            path,
            file,
            bytes_written: 0,
        })
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Bytes written through this handle (not counting earlier content).
    pub fn bytes_written(&self) -> u64 {
        self.bytes_written
    }

    pub fn append(&mut self, event: &TranscriptEvent) -> Result<()> {
        let mut line = event.to_line();
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        self.bytes_written += line.len() as u64;
        Ok(())
    }
}

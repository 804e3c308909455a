//! Instruction-file hierarchy and per-call prompt assembly.

mod memory;

use std::path::{Path, PathBuf};
use std::process::Command;

use crate::types::{Message, Notification};

pub use memory::{
    directory_memory_files, discover_memory_files, include_directives, lazy_load_rules, process_memory_file, LazyRules,
    MemoryFile, MemoryLevel, MAX_USER_MEMORY_FILES,
};

pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a coding agent working in the user's repository. \
Use the provided tools to read, search, edit and run code. Keep answers short.";

/// What one model call is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_context_message: Message,
    pub conversation: Vec<Message>,
}

impl PromptBundle {
    /// User context first, then the conversation.
    pub fn messages(&self) -> Vec<Message> {
        let mut v = Vec::with_capacity(self.conversation.len() + 1);
        v.push(self.user_context_message.clone());
        v.extend(self.conversation.iter().cloned());
        v
    }
}

/// Session-lifetime memo of the two context strings.
#[derive(Debug, Clone, Default)]
pub struct ContextMemo {
    system_prompt: Option<String>,
    user_context: Option<Message>,
    pub memory_files: Vec<MemoryFile>,
}

impl ContextMemo {
    pub fn invalidate(&mut self) {
        self.system_prompt = None;
        self.user_context = None;
    }

    pub fn is_cached(&self) -> bool {
        self.system_prompt.is_some() && self.user_context.is_some()
    }
}

pub struct ContextSources<'a> {
    pub cwd: &'a Path,
    pub user_home: &'a Path,
    pub managed_root: &'a Path,
    pub base_system_prompt: &'a str,
    pub append_system_prompt: Option<&'a str>,
}

/// Short git summary, or `None` outside a repository or without git.
pub fn git_status_summary(cwd: &Path) -> Option<String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(cwd)
        .args(["status", "--short", "--branch"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().take(20).collect();
    Some(lines.join("\n"))
}

pub fn system_context(cwd: &Path) -> String {
    let mut s = format!(
        "# Environment\nWorking directory: {}\nPlatform: {}",
        cwd.display(),
        std::env::consts::OS
    );
    if let Some(git) = git_status_summary(cwd) {
        s.push_str("\n\n# Git status\n");
        s.push_str(&git);
    }
    s
}

/// Memory files under labeled headers, then the date line.
pub fn user_context_text(files: &[MemoryFile], date: &str) -> String {
    let mut s = String::new();
    for f in files {
        s.push_str(&format!(
            "Contents of {} ({:?} instructions):\n\n{}\n\n",
            f.path.display(),
            f.level,
            f.content.trim_end()
        ));
    }
    s.push_str(&format!("Today's date is {date}."));
    s
}

/// Build (or reuse) the bundle for `conversation`.
pub fn assemble_context(
    memo: &mut ContextMemo,
    src: &ContextSources<'_>,
    conversation: Vec<Message>,
) -> (PromptBundle, Vec<Notification>) {
    let mut notes = Vec::new();
    if !memo.is_cached() {
        let mut sys = src.base_system_prompt.to_string();
        sys.push_str("\n\n");
        sys.push_str(&system_context(src.cwd));
        if let Some(extra) = src.append_system_prompt {
            sys.push_str("\n\n");
            sys.push_str(extra);
        }
        let (files, n) = discover_memory_files(src.cwd, src.user_home, src.managed_root);
        notes.extend(n);
        let date = chrono::Local::now().format("%Y-%m-%d").to_string();
        let mut m = Message::user_text(user_context_text(&files, &date));
        m.uuid = format!("user-context-{}", crate::types::new_id());
        memo.system_prompt = Some(sys);
        memo.user_context = Some(m);
        memo.memory_files = files;
    }
    let bundle = PromptBundle {
        system_prompt: memo.system_prompt.clone().unwrap_or_default(),
        user_context_message: memo.user_context.clone().expect("memo populated"),
        conversation,
    };
    (bundle, notes)
}

/// Attachment text announcing lazily activated instruction files.
pub fn activation_attachment(files: &[MemoryFile]) -> Option<Message> {
    if files.is_empty() {
        return None;
    }
    let mut s = String::new();
    for f in files {
        s.push_str(&format!("Instructions from {}:\n\n{}\n\n", f.path.display(), f.content.trim_end()));
    }
    Some(Message::attachment(s.trim_end().to_string()))
}

pub fn paths_of(files: &[MemoryFile]) -> Vec<PathBuf> {
    files.iter().map(|f| f.path.clone()).collect()
}

use std::collections::HashSet;
use std::path::{Component, Path, PathBuf};

use serde::Serialize;

use crate::types::Notification;

/// Files per user memory directory, newest first.
pub const MAX_USER_MEMORY_FILES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryLevel {
    Managed,
    User,
    Project,
    Rules,
    Local,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryFile {
    pub level: MemoryLevel,
    pub path: PathBuf,
    /// After include expansion.
    pub content: String,
    pub directory_scope: PathBuf,
}

fn normalize(p: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

/// `@path` directives in leaf text: outside fenced blocks and inline code,
/// at the start of a line or after whitespace.
pub fn include_directives(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut fence: Option<&str> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(f) = fence {
            if trimmed.starts_with(f) {
                fence = None;
            }
            continue;
        }
        if trimmed.starts_with("```") {
            fence = Some("```");
            continue;
        }
        if trimmed.starts_with("~~~") {
            fence = Some("~~~");
            continue;
        }
        let mut in_code = false;
        let mut prev_ws = true;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c == '`' {
                in_code = !in_code;
            } else if c == '@' && prev_ws && !in_code {
                let mut j = i + 1;
                while j < chars.len() && !chars[j].is_whitespace() && chars[j] != '`' {
                    j += 1;
                }
                let target: String = chars[i + 1..j].iter().collect();
                let target = target.trim_end_matches([',', ';', ')', ']']).to_string();
                if !target.is_empty() {
                    out.push(target);
                }
                i = j;
                prev_ws = false;
                continue;
            }
            prev_ws = c.is_whitespace();
            i += 1;
        }
    }
    out
}

fn resolve_include(target: &str, base_dir: &Path, user_home: &Path) -> PathBuf {
    let p = if let Some(rest) = target.strip_prefix("~/") {
        user_home.join(rest)
    } else if target.starts_with('/') {
        PathBuf::from(target)
    } else {
        base_dir.join(target)
    };
    normalize(&p)
}

/// Expand includes depth-first: the file's own text, then each included
/// file in directive order. `seen` bounds the expansion to one visit per path.
pub fn process_memory_file(path: &Path, seen: &mut HashSet<PathBuf>, user_home: &Path) -> Option<String> {
    let key = normalize(path);
    if !seen.insert(key.clone()) {
        return None;
    }
    let text = std::fs::read_to_string(&key).ok()?;
    let base = key.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = text.clone();
    for target in include_directives(&text) {
        let inc = resolve_include(&target, &base, user_home);
        if let Some(expanded) = process_memory_file(&inc, seen, user_home) {
            if !out.ends_with('\n') {
                out.push('\n');
            }
            out.push('\n');
            out.push_str(&expanded);
        }
    }
    Some(out)
}

fn load(level: MemoryLevel, path: &Path, scope: &Path, user_home: &Path, notes: &mut Vec<Notification>) -> Option<MemoryFile> {
    if !path.is_file() {
        return None;
    }
    match std::fs::read_to_string(path) {
        Ok(_) => {
            let mut seen = HashSet::new();
            let content = process_memory_file(path, &mut seen, user_home)?;
            Some(MemoryFile {
                level,
                path: path.to_path_buf(),
                content,
                directory_scope: scope.to_path_buf(),
            })
        }
        Err(e) => {
            notes.push(Notification::new("memory", format!("skipped {}: {e}", path.display())));
            None
        }
    }
}

fn sorted_md(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "md") && p.is_file())
        .collect();
    v.sort();
    v
}

/// Instruction files that live directly in `dir`, in load order.
pub fn directory_memory_files(dir: &Path, user_home: &Path, notes: &mut Vec<Notification>) -> Vec<MemoryFile> {
    let mut out = Vec::new();
    out.extend(load(MemoryLevel::Project, &dir.join("CLAUDE.md"), dir, user_home, notes));
    out.extend(load(MemoryLevel::Project, &dir.join(".claude/CLAUDE.md"), dir, user_home, notes));
    for p in sorted_md(&dir.join(".claude/rules")) {
        out.extend(load(MemoryLevel::Rules, &p, dir, user_home, notes));
    }
    out.extend(load(MemoryLevel::Local, &dir.join("CLAUDE.local.md"), dir, user_home, notes));
    out
}

/// Managed, then user, then every ancestor of `cwd` from the root down.
/// Later entries take priority.
pub fn discover_memory_files(cwd: &Path, user_home: &Path, managed_root: &Path) -> (Vec<MemoryFile>, Vec<Notification>) {
    let mut notes = Vec::new();
    let mut out = Vec::new();
    out.extend(load(MemoryLevel::Managed, &managed_root.join("CLAUDE.md"), managed_root, user_home, &mut notes));

    let user_dir = user_home.join(".claude");
    out.extend(load(MemoryLevel::User, &user_dir.join("CLAUDE.md"), user_home, user_home, &mut notes));
    let mut memories: Vec<(std::time::SystemTime, PathBuf)> = sorted_md(&user_dir.join("memory"))
        .into_iter()
        .map(|p| (p.metadata().and_then(|m| m.modified()).unwrap_or(std::time::UNIX_EPOCH), p))
        .collect();
    memories.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    for (_, p) in memories.into_iter().take(MAX_USER_MEMORY_FILES) {
        out.extend(load(MemoryLevel::User, &p, user_home, user_home, &mut notes));
    }

    let cwd = normalize(cwd);
    let mut ancestors: Vec<&Path> = cwd.ancestors().collect();
    ancestors.reverse();
    for dir in ancestors {
        out.extend(directory_memory_files(dir, user_home, &mut notes));
    }

    let mut seen = HashSet::new();
    out.retain(|f| seen.insert(normalize(&f.path)));
    (out, notes)
}

/// Directories below `project_dir` already checked for nested instructions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LazyRules {
    activated: HashSet<PathBuf>,
}

impl LazyRules {
    pub fn clear(&mut self) {
        self.activated.clear();
    }

    pub fn is_activated(&self, dir: &Path) -> bool {
        self.activated.contains(dir)
    }
}

/// First read under a nested directory activates the instruction files of
/// every not-yet-seen directory between `project_dir` (exclusive) and the file.
pub fn lazy_load_rules(read_path: &Path, project_dir: &Path, user_home: &Path, state: &mut LazyRules) -> Vec<MemoryFile> {
    let project_dir = normalize(project_dir);
    let read_path = normalize(&if read_path.is_absolute() {
        read_path.to_path_buf()
    } else {
        project_dir.join(read_path)
    });
    let Ok(rel) = read_path.strip_prefix(&project_dir) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    let mut notes = Vec::new();
    let mut dir = project_dir.clone();
    let comps: Vec<_> = rel.components().collect();
    // Every component except the last (the file itself).
    for c in comps.iter().take(comps.len().saturating_sub(1)) {
        dir.push(c);
        if state.activated.insert(dir.clone()) {
            out.extend(directory_memory_files(&dir, user_home, &mut notes));
        }
    }
    out
}

use std::path::Path;
use std::process::Stdio;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde_json::{json, Value};

use super::skills::SkillDef;
use super::{Attachment, Tool, ToolContext, ToolOrigin, ToolOutcome, ToolRequest, ToolSpec};
use crate::permissions::should_use_sandbox;

/// Line prepended to Bash output when the default (no-op) sandbox runner is used.
pub const SANDBOX_MARKER: &str = "[sandbox: noop runner]";

const DEFAULT_BASH_TIMEOUT_MS: u64 = 120_000;
const GREP_MAX_LINES: usize = 500;

fn str_arg<'a>(req: &'a ToolRequest, key: &str) -> &'a str {
    req.input.get(key).and_then(Value::as_str).unwrap_or_default()
}

/// Every built-in except Skill and Agent, which need runtime wiring.
pub fn builtin_tools() -> Vec<Arc<dyn Tool>> {
    vec![
        Arc::new(BashTool),
        Arc::new(FileReadTool),
        Arc::new(FileEditTool),
        Arc::new(FileWriteTool),
        Arc::new(GlobTool),
        Arc::new(GrepTool),
    ]
}

pub struct BashTool;

#[async_trait]
impl Tool for BashTool {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new("Bash", "Run a shell command in the project directory.", ToolOrigin::Builtin).with_schema(json!({
            "type": "object",
            "required": ["command"],
            "properties": {
                "command": {"type": "string"},
                "timeout_ms": {"type": "integer"},
                "dangerously_disable_sandbox": {"type": "boolean"}
            }
        }))
    }

    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        let command = str_arg(req, "command");
        if command.trim().is_empty() {
            return ToolOutcome::error(&req.tool_use_id, "empty command");
        }
        let opt_out = req.input.get("dangerously_disable_sandbox").and_then(Value::as_bool).unwrap_or(false);
        let sandboxed = should_use_sandbox(&ctx.sandbox.clone().with_opt_out(opt_out), command);
        let runner = std::env::var("HARNESS_SANDBOX_RUNNER").ok().filter(|r| !r.trim().is_empty());

        let mut cmd = match (&runner, sandboxed) {
            (Some(runner), true) => {
                let mut c = tokio::process::Command::new(runner);
                c.arg("sh").arg("-c").arg(command);
                c
            }
            _ => {
                let mut c = tokio::process::Command::new("sh");
                c.arg("-c").arg(command);
                c
            }
        };
        cmd.current_dir(&ctx.project_dir)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .kill_on_drop(true);

        let timeout = req.input.get("timeout_ms").and_then(Value::as_u64).unwrap_or(DEFAULT_BASH_TIMEOUT_MS);
        let output = match tokio::time::timeout(Duration::from_millis(timeout), cmd.output()).await {
            Err(_) => return ToolOutcome::error(&req.tool_use_id, format!("command timed out after {timeout} ms")),
            Ok(Err(e)) => return ToolOutcome::error(&req.tool_use_id, format!("failed to spawn shell: {e}")),
            Ok(Ok(o)) => o,
        };
        let code = output.status.code().unwrap_or(-1);
        let mut content = String::new();
        if sandboxed && runner.is_none() {
            content.push_str(SANDBOX_MARKER);
            content.push('\n');
        }
        content.push_str(&String::from_utf8_lossy(&output.stdout));
        let stderr = String::from_utf8_lossy(&output.stderr);
        if !stderr.is_empty() {
            if !content.is_empty() && !content.ends_with('\n') {
                content.push('\n');
            }
            content.push_str(&stderr);
        }
        if !content.is_empty() && !content.ends_with('\n') {
            content.push('\n');
        }
        content.push_str(&format!("[exit code: {code}]"));
        if code == 0 {
            ToolOutcome::ok(&req.tool_use_id, content)
        } else {
            ToolOutcome::error(&req.tool_use_id, content)
        }
    }
}

pub struct FileReadTool;

#[async_trait]
impl Tool for FileReadTool {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new("FileRead", "Read a file; returns numbered lines.", ToolOrigin::Builtin)
            .read_only()
            .with_cap(None)
            .with_schema(json!({
                "type": "object",
                "required": ["path"],
                "properties": {
                    "path": {"type": "string"},
                    "offset": {"type": "integer"},
                    "limit": {"type": "integer"}
                }
            }))
    }

    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        let path = ctx.resolve(str_arg(req, "path"));
        let text = match tokio::fs::read(&path).await {
            Ok(bytes) => String::from_utf8_lossy(&bytes).into_owned(),
            Err(e) => return ToolOutcome::error(&req.tool_use_id, format!("cannot read {}: {e}", path.display())),
        };
        let offset = req.input.get("offset").and_then(Value::as_u64).unwrap_or(1).max(1) as usize;
        let limit = req.input.get("limit").and_then(Value::as_u64).map(|l| l as usize).unwrap_or(usize::MAX);
        let mut out = String::new();
        for (i, line) in text.lines().enumerate().skip(offset - 1).take(limit) {
            out.push_str(&format!("{:>6}\t{}\n", i + 1, line));
        }
        ToolOutcome::ok(&req.tool_use_id, out)
    }
}

fn checkpoint(ctx: &ToolContext, path: &Path) -> Result<(), String> {
    match &ctx.checkpoints {
        Some(sink) => sink.checkpoint(path).map(|_| ()).map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

pub struct FileWriteTool;

#[async_trait]
impl Tool for FileWriteTool {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new("FileWrite", "Create or overwrite a file.", ToolOrigin::Builtin).with_schema(json!({
            "type": "object",
            "required": ["path", "content"],
            "properties": {"path": {"type": "string"}, "content": {"type": "string"}}
        }))
    }

    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        let path = ctx.resolve(str_arg(req, "path"));
        let content = str_arg(req, "content");
        if let Err(e) = checkpoint(ctx, &path) {
            return ToolOutcome::error(&req.tool_use_id, format!("checkpoint failed: {e}"));
        }
        if let Some(parent) = path.parent() {
            if let Err(e) = tokio::fs::create_dir_all(parent).await {
                return ToolOutcome::error(&req.tool_use_id, format!("cannot create {}: {e}", parent.display()));
            }
        }
        match tokio::fs::write(&path, content).await {
            Ok(()) => ToolOutcome::ok(&req.tool_use_id, format!("wrote {} bytes to {}", content.len(), path.display())),
            Err(e) => ToolOutcome::error(&req.tool_use_id, format!("cannot write {}: {e}", path.display())),
        }
    }
}

pub struct FileEditTool;

#[async_trait]
impl Tool for FileEditTool {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new("FileEdit", "Replace an exact string occurrence in a file.", ToolOrigin::Builtin).with_schema(json!({
            "type": "object",
            "required": ["path", "old_string", "new_string"],
            "properties": {
                "path": {"type": "string"},
                "old_string": {"type": "string"},
                "new_string": {"type": "string"},
                "replace_all": {"type": "boolean"}
            }
        }))
    }

    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        let path = ctx.resolve(str_arg(req, "path"));
        let old = str_arg(req, "old_string");
        let new = str_arg(req, "new_string");
        let replace_all = req.input.get("replace_all").and_then(Value::as_bool).unwrap_or(false);
        if old.is_empty() {
            return ToolOutcome::error(&req.tool_use_id, "old_string must not be empty");
        }
        let text = match tokio::fs::read_to_string(&path).await {
            Ok(t) => t,
            Err(e) => return ToolOutcome::error(&req.tool_use_id, format!("cannot read {}: {e}", path.display())),
        };
        let count = text.matches(old).count();
        if count == 0 {
            return ToolOutcome::error(&req.tool_use_id, format!("old_string not found in {}", path.display()))
                .with_reason("not_found");
        }
        if count > 1 && !replace_all {
            return ToolOutcome::error(
                &req.tool_use_id,
                format!("ambiguous match: old_string occurs {count} times in {}", path.display()),
            )
            .with_reason("ambiguous");
        }
        if let Err(e) = checkpoint(ctx, &path) {
            return ToolOutcome::error(&req.tool_use_id, format!("checkpoint failed: {e}"));
        }
        let updated = if replace_all { text.replace(old, new) } else { text.replacen(old, new, 1) };
        match tokio::fs::write(&path, updated).await {
            Ok(()) => ToolOutcome::ok(&req.tool_use_id, format!("edited {} ({count} replacement(s))", path.display())),
            Err(e) => ToolOutcome::error(&req.tool_use_id, format!("cannot write {}: {e}", path.display())),
        }
    }
}

fn walk_files(root: &Path) -> impl Iterator<Item = walkdir::DirEntry> {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.file_name() != ".git")
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
}

fn relative(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().into_owned()
}

pub struct GlobTool;

#[async_trait]
impl Tool for GlobTool {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new("Glob", "List files matching a glob pattern.", ToolOrigin::Builtin)
            .read_only()
            .with_schema(json!({
                "type": "object",
                "required": ["pattern"],
                "properties": {"pattern": {"type": "string"}, "path": {"type": "string"}}
            }))
    }

    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        let pattern = str_arg(req, "pattern");
        let matcher = match globset::GlobBuilder::new(pattern).literal_separator(true).build() {
            Ok(g) => g.compile_matcher(),
            Err(e) => return ToolOutcome::error(&req.tool_use_id, format!("invalid glob: {e}")),
        };
        let root = match req.input.get("path").and_then(Value::as_str) {
            Some(p) => ctx.resolve(p),
            None => ctx.project_dir.clone(),
        };
        let hits: Vec<String> = walk_files(&root)
            .map(|e| relative(&root, e.path()))
            .filter(|rel| matcher.is_match(rel))
            .collect();
        ToolOutcome::ok(&req.tool_use_id, hits.join("\n"))
    }
}

pub struct GrepTool;

#[async_trait]
impl Tool for GrepTool {
    fn spec(&self) -> ToolSpec {
        ToolSpec::new("Grep", "Search file contents with a regular expression.", ToolOrigin::Builtin)
            .read_only()
            .with_schema(json!({
                "type": "object",
                "required": ["pattern"],
                "properties": {
                    "pattern": {"type": "string"},
                    "path": {"type": "string"},
                    "glob": {"type": "string"}
                }
            }))
    }

    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        let re = match regex::Regex::new(str_arg(req, "pattern")) {
            Ok(r) => r,
            Err(e) => return ToolOutcome::error(&req.tool_use_id, format!("invalid regex: {e}")),
        };
        let filter = match req.input.get("glob").and_then(Value::as_str) {
            Some(g) => match globset::Glob::new(g) {
                Ok(g) => Some(g.compile_matcher()),
                Err(e) => return ToolOutcome::error(&req.tool_use_id, format!("invalid glob: {e}")),
            },
            None => None,
        };
        let root = match req.input.get("path").and_then(Value::as_str) {
            Some(p) => ctx.resolve(p),
            None => ctx.project_dir.clone(),
        };
        let mut lines = Vec::new();
        'files: for entry in walk_files(&root) {
            let rel = relative(&root, entry.path());
            if filter.as_ref().is_some_and(|f| !f.is_match(&rel)) {
                continue;
            }
            let Ok(text) = std::fs::read_to_string(entry.path()) else { continue };
            for (i, line) in text.lines().enumerate() {
                if re.is_match(line) {
                    lines.push(format!("{rel}:{}:{line}", i + 1));
                    if lines.len() >= GREP_MAX_LINES {
                        break 'files;
                    }
                }
            }
        }
        ToolOutcome::ok(&req.tool_use_id, lines.join("\n"))
    }
}

/// Injects a skill's instructions into the conversation.
pub struct SkillTool {
    skills: Arc<Vec<SkillDef>>,
}

impl SkillTool {
    pub fn new(skills: Vec<SkillDef>) -> Self {
        SkillTool { skills: Arc::new(skills) }
    }
}

#[async_trait]
impl Tool for SkillTool {
    fn spec(&self) -> ToolSpec {
        let mut description = String::from("Load a skill's instructions into the conversation. Available skills:");
        for s in self.skills.iter() {
            description.push_str(&format!("\n- {}: {}", s.name, s.description));
        }
        ToolSpec::new("Skill", description, ToolOrigin::Builtin).with_schema(json!({
            "type": "object",
            "required": ["skill"],
            "properties": {"skill": {"type": "string"}, "args": {"type": "string"}}
        }))
    }

    async fn invoke(&self, req: &ToolRequest, _ctx: &ToolContext) -> ToolOutcome {
        let name = str_arg(req, "skill");
        let Some(skill) = self.skills.iter().find(|s| s.name == name) else {
            return ToolOutcome::error(&req.tool_use_id, format!("unknown skill `{name}`"));
        };
        let mut text = skill.body.clone();
        if let Some(args) = req.input.get("args").and_then(Value::as_str).filter(|a| !a.is_empty()) {
            text.push_str(&format!("\n\nArguments: {args}"));
        }
        let mut out = ToolOutcome::ok(&req.tool_use_id, format!("Loaded skill {}", skill.name)).with_attachment(
            Attachment::Context {
                source: format!("skill:{}", skill.name),
                text,
            },
        );
        if !skill.allowed_tools.is_empty() {
            out = out.with_attachment(Attachment::SessionAllow {
                rules: skill.allowed_tools.clone(),
            });
        }
        out
    }
}

/// Spawns a subagent through the context's delegate.
pub struct AgentTool {
    agents: Vec<(String, String)>,
}

impl AgentTool {
    pub fn new(agents: Vec<(String, String)>) -> Self {
        AgentTool { agents }
    }
}

#[async_trait]
impl Tool for AgentTool {
    fn spec(&self) -> ToolSpec {
        let mut description = String::from("Delegate a self-contained task to a subagent. Agent types:");
        for (name, desc) in &self.agents {
            description.push_str(&format!("\n- {name}: {desc}"));
        }
        ToolSpec::new("Agent", description, ToolOrigin::Builtin).with_schema(json!({
            "type": "object",
            "required": ["subagent_type", "prompt"],
            "properties": {
                "subagent_type": {"type": "string"},
                "prompt": {"type": "string"},
                "description": {"type": "string"},
                "isolation": {"type": "string"},
                "background": {"type": "boolean"}
            }
        }))
    }

    async fn invoke(&self, req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
        match &ctx.delegate {
            Some(d) => d.delegate(req, ctx).await,
            None => ToolOutcome::error(&req.tool_use_id, "subagent delegation is not available here"),
        }
    }
}

//! Filesystem roots and `settings.json` loading.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hooks::HookConfig;
use crate::permissions::{parse_rule, Effect, PermissionMode, PermissionRule, RuleSource, SandboxConfig};
use crate::tools::mcp::McpServerSpec;

pub const DEFAULT_WINDOW_TOKENS: u64 = 200_000;
pub const DEFAULT_AUTOCOMPACT_THRESHOLD: f64 = 0.92;
pub const DEFAULT_SNIP_RETENTION_TURNS: usize = 20;
pub const DEFAULT_MICROCOMPACT_AGE_TURNS: usize = 5;
pub const DEFAULT_BUDGET_CHARS: usize = 40_000;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompactionConfig {
    pub window_tokens: u64,
    pub autocompact_threshold: f64,
    pub snip_retention_turns: usize,
    pub microcompact_age_turns: usize,
    pub budget_chars: usize,
    pub snip_enabled: bool,
    pub microcompact_enabled: bool,
    pub collapse_enabled: bool,
    pub autocompact_enabled: bool,
}

impl Default for CompactionConfig {
    fn default() -> Self {
        CompactionConfig {
            window_tokens: DEFAULT_WINDOW_TOKENS,
            autocompact_threshold: DEFAULT_AUTOCOMPACT_THRESHOLD,
            snip_retention_turns: DEFAULT_SNIP_RETENTION_TURNS,
            microcompact_age_turns: DEFAULT_MICROCOMPACT_AGE_TURNS,
            budget_chars: DEFAULT_BUDGET_CHARS,
            snip_enabled: true,
            microcompact_enabled: true,
            collapse_enabled: true,
            autocompact_enabled: true,
        }
    }
}

impl CompactionConfig {
    /// Only the always-on budget shaper.
    pub fn budget_only() -> Self {
        CompactionConfig {
            snip_enabled: false,
            microcompact_enabled: false,
            collapse_enabled: false,
            autocompact_enabled: false,
            ..Default::default()
        }
    }

    pub fn threshold_tokens(&self) -> f64 {
        self.autocompact_threshold * self.window_tokens as f64
    }
}

/// Where the harness keeps state and looks for policy.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessPaths {
    /// `$HARNESS_HOME`, default `~/.harnesskit`.
    pub home: PathBuf,
    /// The user's home directory (for `~/.claude/...` and `@~/` includes).
    pub user_home: PathBuf,
    /// Managed policy directory holding `settings.json` and `CLAUDE.md`.
    pub managed_root: PathBuf,
}

impl HarnessPaths {
    pub fn from_env() -> Self {
        let user_home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/"));
        let home = std::env::var_os("HARNESS_HOME")
            .map(PathBuf::from)
            .unwrap_or_else(|| user_home.join(".harnesskit"));
        let managed_root = std::env::var_os("HARNESS_MANAGED_ROOT")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("/etc/harnesskit"));
        HarnessPaths { home, user_home, managed_root }
    }

    /// Everything rooted under one directory; used by tests and examples.
    pub fn rooted(root: &Path) -> Self {
        HarnessPaths {
            home: root.join("harness-home"),
            user_home: root.join("user-home"),
            managed_root: root.join("managed"),
        }
    }

    pub fn projects_root(&self) -> PathBuf {
        self.home.join("projects")
    }

    pub fn project_dir_for(&self, cwd: &Path) -> PathBuf {
        self.projects_root().join(encode_project_dir(cwd))
    }

    pub fn history_path(&self) -> PathBuf {
        self.home.join("history.jsonl")
    }

    pub fn file_history_root(&self) -> PathBuf {
        self.home.join("file-history")
    }
}

/// Path separators become `-`: `/repo/sub` is stored under `-repo-sub`.
pub fn encode_project_dir(cwd: &Path) -> String {
    cwd.to_string_lossy().replace(['/', '\\'], "-")
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PermissionsSection {
    #[serde(default)]
    allow: Vec<String>,
    #[serde(default)]
    deny: Vec<String>,
    #[serde(default)]
    ask: Vec<String>,
    default_mode: Option<PermissionMode>,
}

#[derive(Debug, Default, Deserialize)]
struct SandboxSection {
    #[serde(default)]
    enabled: bool,
    #[serde(default)]
    exclude: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SettingsFile {
    permissions: Option<PermissionsSection>,
    sandbox: Option<SandboxSection>,
    #[serde(default)]
    hooks: Vec<HookConfig>,
    #[serde(default)]
    mcp_servers: BTreeMap<String, McpServerSpec>,
    compaction: Option<Value>,
    model: Option<String>,
    fallback_model: Option<String>,
    simple_mode: Option<bool>,
}

/// Settings merged across managed, user, project and local files.
#[derive(Clone)]
pub struct Settings {
    pub rules: Vec<PermissionRule>,
    pub sandbox: SandboxConfig,
    pub hooks: Vec<HookConfig>,
    pub mcp_servers: BTreeMap<String, McpServerSpec>,
    pub compaction: CompactionConfig,
    pub default_mode: Option<PermissionMode>,
    pub model: Option<String>,
    pub fallback_model: Option<String>,
    pub simple_mode: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            rules: Vec::new(),
            sandbox: SandboxConfig::disabled(),
            hooks: Vec::new(),
            mcp_servers: BTreeMap::new(),
            compaction: CompactionConfig::default(),
            default_mode: None,
            model: None,
            fallback_model: None,
            simple_mode: false,
        }
    }
}

pub fn settings_files(paths: &HarnessPaths, project_dir: &Path) -> Vec<(PathBuf, RuleSource)> {
    vec![
        (paths.managed_root.join("settings.json"), RuleSource::Managed),
        (paths.home.join("settings.json"), RuleSource::Settings),
        (project_dir.join(".claude/settings.json"), RuleSource::Settings),
        (project_dir.join(".claude/settings.local.json"), RuleSource::Settings),
    ]
}

pub fn load_settings(paths: &HarnessPaths, project_dir: &Path) -> Result<Settings> {
    let mut out = Settings::default();
    let mut compaction = Value::Object(Default::default());
    let mut sandbox: Option<SandboxSection> = None;
    for (path, source) in settings_files(paths, project_dir) {
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(Error::io(&path, e)),
        };
        let file: SettingsFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(p) = file.permissions {
            for (list, effect) in [(&p.deny, Effect::Deny), (&p.ask, Effect::Ask), (&p.allow, Effect::Allow)] {
                for text in list {
                    out.rules.push(parse_rule(text, effect, source)?);
                }
            }
            out.default_mode = p.default_mode.or(out.default_mode);
        }
        if file.sandbox.is_some() {
            sandbox = file.sandbox;
        }
        out.hooks.extend(file.hooks);
        out.mcp_servers.extend(file.mcp_servers);
        if let Some(Value::Object(c)) = file.compaction {
            if let Value::Object(acc) = &mut compaction {
                acc.extend(c);
            }
        }
        out.model = file.model.or(out.model);
        out.fallback_model = file.fallback_model.or(out.fallback_model);
        out.simple_mode = file.simple_mode.unwrap_or(out.simple_mode);
    }
    let mcp_json = project_dir.join(".mcp.json");
    if let Ok(text) = std::fs::read_to_string(&mcp_json) {
        let file: SettingsFile =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", mcp_json.display())))?;
        for (name, spec) in file.mcp_servers {
            out.mcp_servers.entry(name).or_insert(spec);
        }
    }
    out.compaction = serde_json::from_value(compaction).map_err(|e| Error::Config(format!("compaction: {e}")))?;
    if let Some(s) = sandbox {
        out.sandbox = SandboxConfig::new(s.enabled, s.exclude)?;
    }
    Ok(out)
}

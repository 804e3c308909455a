use std::collections::HashSet;
use std::sync::Arc;

use super::skills::SkillDef;
use super::{builtin_tools, AgentTool, SkillTool, Tool, ToolSpec};
use crate::permissions::{prefilter_tools, PermissionRule};

pub const BUILTIN_NAMES: &[&str] = &["Bash", "FileRead", "FileEdit", "FileWrite", "Glob", "Grep", "Skill", "Agent"];

/// The reduced set offered in simple mode.
pub const SIMPLE_MODE_TOOLS: &[&str] = &["Bash", "FileRead", "FileEdit"];

#[derive(Clone, Default)]
pub struct ToolPool {
    tools: Vec<Arc<dyn Tool>>,
    specs: Vec<ToolSpec>,
}

impl ToolPool {
    pub fn new(tools: Vec<Arc<dyn Tool>>) -> Self {
        let specs = tools.iter().map(|t| t.spec()).collect();
        ToolPool { tools, specs }
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Tool>> {
        self.specs.iter().position(|s| s.name == name).map(|i| &self.tools[i])
    }

    pub fn spec(&self, name: &str) -> Option<&ToolSpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn specs(&self) -> &[ToolSpec] {
        &self.specs
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(|s| s.name.clone()).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.spec(name).is_some()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn retain(&self, mut keep: impl FnMut(&ToolSpec) -> bool) -> ToolPool {
        let (tools, specs) = self
            .tools
            .iter()
            .zip(&self.specs)
            .filter(|(_, s)| keep(s))
            .map(|(t, s)| (t.clone(), s.clone()))
            .unzip();
        ToolPool { tools, specs }
    }

    /// Same pool with one tool swapped out (or appended when absent).
    pub fn with_tool(&self, tool: Arc<dyn Tool>) -> ToolPool {
        let spec = tool.spec();
        let mut out = self.clone();
        match out.specs.iter().position(|s| s.name == spec.name) {
            Some(i) => {
                out.tools[i] = tool;
                out.specs[i] = spec;
            }
            None => {
                out.tools.push(tool);
                out.specs.push(spec);
            }
        }
        out
    }
}

#[derive(Clone, Default)]
pub struct PoolConfig {
    pub simple_mode: bool,
    pub include_agent: bool,
    pub skills: Vec<SkillDef>,
    /// `(name, description)` of delegatable agents, listed in the Agent tool's description.
    pub agents: Vec<(String, String)>,
}

/// Built-ins, then simple-mode filter, then deny prefilter, then deny-filtered
/// MCP tools, then dedupe by name with built-ins first.
pub fn assemble_tool_pool(cfg: &PoolConfig, mcp_tools: Vec<Arc<dyn Tool>>, rules: &[PermissionRule]) -> ToolPool {
    let mut builtins = builtin_tools();
    builtins.push(Arc::new(SkillTool::new(cfg.skills.clone())));
    if cfg.include_agent {
        builtins.push(Arc::new(AgentTool::new(cfg.agents.clone())));
    }
    let mut pool = ToolPool::new(builtins);
    if cfg.simple_mode {
        pool = pool.retain(|s| SIMPLE_MODE_TOOLS.contains(&s.name.as_str()));
    }
    let allowed = names(prefilter_tools(pool.specs().to_vec(), rules));
    pool = pool.retain(|s| allowed.contains(&s.name));

    let mcp = ToolPool::new(mcp_tools);
    let allowed_mcp = names(prefilter_tools(mcp.specs().to_vec(), rules));
    let mut seen: HashSet<String> = pool.names().into_iter().collect();
    let mcp = mcp.retain(|s| allowed_mcp.contains(&s.name) && seen.insert(s.name.clone()));

    let mut tools = pool.tools;
    tools.extend(mcp.tools);
    ToolPool::new(tools)
}

fn names(specs: Vec<ToolSpec>) -> HashSet<String> {
    specs.into_iter().map(|s| s.name).collect()
}

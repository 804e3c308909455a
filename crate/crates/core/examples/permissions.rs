//! Rule evaluation across modes, compound commands and the deny prefilter.

use std::path::Path;

use harnesskit::permissions::{evaluate, parse_rule, prefilter_tools, Effect, PermissionMode, RuleSource};
use harnesskit::tools::{ToolOrigin, ToolRequest, ToolSpec};
use serde_json::json;

fn main() {
    let rules = vec![
        parse_rule("Bash(prefix:git)", Effect::Allow, RuleSource::Settings).unwrap(),
        parse_rule("Bash(prefix:git push)", Effect::Ask, RuleSource::Settings).unwrap(),
        parse_rule("Bash(prefix:rm)", Effect::Deny, RuleSource::Managed).unwrap(),
        parse_rule("FileEdit(src/**)", Effect::Allow, RuleSource::Cli).unwrap(),
        parse_rule("mcp__billing", Effect::Deny, RuleSource::Settings).unwrap(),
    ];
    let project = Path::new("/work/app");
    let requests = [
        ToolRequest::new("1", "Bash", json!({"command": "git status"})),
        ToolRequest::new("2", "Bash", json!({"command": "git push origin main"})),
        ToolRequest::new("3", "Bash", json!({"command": "git status && rm -rf build"})),
        ToolRequest::new("4", "FileEdit", json!({"path": "src/main.rs"})),
        ToolRequest::new("5", "FileEdit", json!({"path": "Cargo.toml"})),
        ToolRequest::new("6", "FileRead", json!({"path": "README.md"})),
    ];
    for mode in [PermissionMode::Plan, PermissionMode::Default, PermissionMode::AcceptEdits, PermissionMode::BypassPermissions] {
        println!("mode {mode}");
        for req in &requests {
            let d = evaluate(&rules, mode, req, project).unwrap();
            println!("  {:<9} {:<40} {:?} ({:?}: {})", req.tool_name, req.input.to_string(), d.verdict, d.layer, d.reason);
        }
    }

    let pool = vec![
        ToolSpec::new("Bash", "", ToolOrigin::Builtin),
        ToolSpec::new("mcp__billing__refund", "", ToolOrigin::Mcp),
        ToolSpec::new("mcp__docs__search", "", ToolOrigin::Mcp),
    ];
    let kept: Vec<String> = prefilter_tools(pool, &rules).into_iter().map(|s| s.name).collect();
    println!("offered to the model: {kept:?}");
}

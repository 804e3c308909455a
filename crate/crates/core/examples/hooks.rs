//! PreToolUse hooks that block a command, rewrite an input and add context.

use std::sync::Arc;

use harnesskit::config::HarnessPaths;
use harnesskit::engine::{run_turn, Harness, Session};
use harnesskit::hooks::{HookEvent, HookOutput, HookRegistry};
use harnesskit::model::{ScriptStep, ScriptedBackend};
use harnesskit::permissions::{parse_rule, Effect, RuleSource};
use harnesskit::types::ContentBlock;
use serde_json::json;
use tokio_util::sync::CancellationToken;

#[tokio::main]
async fn main() {
    let root = tempfile::tempdir().unwrap();
    let project = root.path().join("repo");
    std::fs::create_dir_all(&project).unwrap();

    let hooks = HookRegistry::new()
        .with_callback(HookEvent::PreToolUse, Some("Bash"), |_, payload| {
            let cmd = payload["tool_input"]["command"].as_str().unwrap_or_default();
            if cmd.contains("curl") {
                return Ok(HookOutput::deny("network access is blocked by policy"));
            }
            if let Some(rest) = cmd.strip_prefix("ls") {
                return Ok(HookOutput {
                    updated_input: Some(json!({"command": format!("ls -1{rest}")})),
                    ..Default::default()
                });
            }
            Ok(HookOutput::default())
        })
        .with_callback(HookEvent::PostToolUse, None, |_, payload| {
            Ok(HookOutput::context(format!("audited {}", payload["tool_name"])))
        });

    let backend = Arc::new(ScriptedBackend::new(vec![
        ScriptStep::tool_use("Bash", json!({"command": "curl https://example.com"})),
        ScriptStep::tool_use("Bash", json!({"command": "ls"})),
        ScriptStep::text("done"),
    ]));
    let h = Harness::new(backend, HarnessPaths::rooted(root.path()))
        .with_rules(vec![parse_rule("Bash", Effect::Allow, RuleSource::Cli).unwrap()])
        .with_hooks(hooks)
        .into_shared();
    let mut s = Session::create(&h, &project).unwrap();
    run_turn(&h, &mut s, "look around", CancellationToken::new()).await;

    for m in s.messages() {
        for b in &m.blocks {
            match b {
                ContentBlock::ToolUse { name, input, .. } => println!("tool_use    {name} {input}"),
                ContentBlock::ToolResult { content, is_error, .. } => {
                    println!("tool_result error={is_error} {}", content.replace('\n', " | "))
                }
                ContentBlock::Text { text } => println!("{:?}      {}", m.role, text.replace('\n', " | ")),
                ContentBlock::Thinking { .. } => {}
            }
        }
    }
}

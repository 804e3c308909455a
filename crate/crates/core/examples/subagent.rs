//! Delegating to the Explore agent: only the summary reaches the parent.

use std::sync::Arc;

use harnesskit::config::HarnessPaths;
use harnesskit::engine::{run_turn, Harness, LoopEvent, Session};
use harnesskit::model::{ScriptStep, ScriptedBackend};
use harnesskit::permissions::{parse_rule, Effect, RuleSource};
use harnesskit::persistence::load_transcript;
use harnesskit::types::ContentBlock;
use serde_json::json;
use tokio_util::sync::CancellationToken;

#[tokio::main]
async fn main() {
    let root = tempfile::tempdir().unwrap();
    let project = root.path().join("repo");
    std::fs::create_dir_all(project.join("src")).unwrap();
    std::fs::write(project.join("src/auth.rs"), "fn login() {}\n").unwrap();

    // Parent asks for delegation; the child's steps come next in the same script.
    let backend = Arc::new(ScriptedBackend::new(vec![
        ScriptStep::tool_use("Agent", json!({"subagent_type": "Explore", "prompt": "where is login defined?"})),
        ScriptStep::tool_use("Grep", json!({"pattern": "fn login", "path": "."})),
        ScriptStep::tool_use("FileEdit", json!({"path": "src/auth.rs", "old_string": "{}", "new_string": "{ todo!() }"})),
        ScriptStep::text("login is defined in src/auth.rs line 1."),
        ScriptStep::text("The explorer found it in src/auth.rs."),
    ]));
    let rules = ["Agent", "Grep", "FileEdit"]
        .iter()
        .map(|r| parse_rule(r, Effect::Allow, RuleSource::Cli).unwrap())
        .collect();
    let h = Harness::new(backend, HarnessPaths::rooted(root.path())).with_rules(rules).into_shared();
    let mut s = Session::create(&h, &project).unwrap();
    let mut rx = s.events.subscribe();
    run_turn(&h, &mut s, "find the login function", CancellationToken::new()).await;

    for m in s.messages() {
        for b in &m.blocks {
            if let ContentBlock::ToolResult { content, .. } = b {
                println!("parent received: {content}");
            }
        }
    }
    println!("parent messages: {}", s.messages().len());
    println!("src/auth.rs untouched: {}", std::fs::read_to_string(project.join("src/auth.rs")).unwrap().trim());

    let mut sidechains = Vec::new();
    while let Ok(ev) = rx.try_recv() {
        if let LoopEvent::SubagentUpdate { agent_type, status, transcript_path, .. } = ev {
            println!("subagent {agent_type}: {status}");
            if !sidechains.contains(&transcript_path) {
                sidechains.push(transcript_path);
            }
        }
    }
    for path in sidechains {
        let child = load_transcript(&path).unwrap();
        println!("sidechain {}: {} messages", path.file_name().unwrap().to_string_lossy(), child.messages.len());
        for m in &child.messages {
            for b in &m.blocks {
                if let ContentBlock::ToolResult { content, is_error, .. } = b {
                    println!("  child tool result (error={is_error}): {}", content.lines().next().unwrap_or(""));
                }
            }
        }
    }
}

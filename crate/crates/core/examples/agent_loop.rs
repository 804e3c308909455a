//! One scripted turn through the full loop, printing every loop event.

use std::sync::Arc;

use harnesskit::config::HarnessPaths;
use harnesskit::engine::{run_turn, Harness, LoopEvent, Session};
use harnesskit::model::{ScriptStep, ScriptedBackend};
use harnesskit::permissions::{parse_rule, Effect, RuleSource};
use serde_json::json;
use tokio_util::sync::CancellationToken;

#[tokio::main]
async fn main() {
    let root = tempfile::tempdir().unwrap();
    let project = root.path().join("repo");
    std::fs::create_dir_all(&project).unwrap();
    std::fs::write(project.join("notes.txt"), "buy milk\n").unwrap();

    let backend = Arc::new(ScriptedBackend::new(vec![
        ScriptStep::tool_uses(vec![
            ("Glob", json!({"pattern": "*.txt"})),
            ("FileRead", json!({"path": "notes.txt"})),
        ])
        .with_text("Looking around first."),
        ScriptStep::tool_use("FileEdit", json!({"path": "notes.txt", "old_string": "milk", "new_string": "oat milk"})),
        ScriptStep::text("Updated the shopping list."),
    ]));
    let rules = ["Glob", "FileRead", "FileEdit(notes.txt)"]
        .iter()
        .map(|r| parse_rule(r, Effect::Allow, RuleSource::Cli).unwrap())
        .collect();
    let h = Harness::new(backend, HarnessPaths::rooted(root.path())).with_rules(rules).into_shared();
    let mut s = Session::create(&h, &project).unwrap();
    let mut rx = s.events.subscribe();

    let out = run_turn(&h, &mut s, "switch to oat milk", CancellationToken::new()).await;
    while let Ok(ev) = rx.try_recv() {
        match ev {
            LoopEvent::StreamDelta { .. } => {}
            LoopEvent::Message(e) => println!("message    {}", e.to_line().chars().take(110).collect::<String>()),
            other => println!("{:<10} {}", other.kind(), other.to_json()),
        }
    }
    println!("\nstop: {:?}, model calls: {}", out.reason, out.model_calls);
    println!("notes.txt: {}", std::fs::read_to_string(project.join("notes.txt")).unwrap().trim());
    println!("transcript: {}", s.transcript_path().display());
}

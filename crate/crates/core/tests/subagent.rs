mod common;

use std::process::Command;
use std::sync::Arc;

use common::{drain, turn, Fixture};
use harnesskit::engine::{AskAnswer, Harness, LoopEvent, QueueResolver, Session, StopReason};
use harnesskit::model::{BackendError, EventStream, ModelBackend, ModelCall, ScriptStep, ScriptedBackend};
use harnesskit::permissions::{parse_rule, Effect, PermissionMode, PermissionRule, RuleSource};
use harnesskit::persistence::load_transcript;
use harnesskit::subagent::{builtin_agents, run_agent, AgentSource, Isolation, ParentLink, SidechainMeta};
use harnesskit::types::{char_estimate, ContentBlock, Role};
use serde_json::json;
use tokio_util::sync::CancellationToken;

fn allow(rule: &str) -> PermissionRule {
    parse_rule(rule, Effect::Allow, RuleSource::Cli).unwrap()
}

fn agent(kind: &str, prompt: &str) -> ScriptStep {
    ScriptStep::tool_use("Agent", json!({"subagent_type": kind, "prompt": prompt}))
}

fn result_of(s: &Session, idx: usize) -> (String, bool) {
    match &s.messages()[idx].blocks[0] {
        ContentBlock::ToolResult { content, is_error, .. } => (content.clone(), *is_error),
        other => panic!("not a tool result: {other:?}"),
    }
}

#[tokio::test]
async fn child_runs_in_a_sidechain_and_returns_only_text() {
    let f = Fixture::new(vec![
        agent("general-purpose", "count files"),
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
        ScriptStep::text("there are no files"),
        ScriptStep::text("parent done"),
    ]);
    let h = f.harness().with_rules(vec![allow("Agent"), allow("Glob")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    let out = turn(&h, &mut s, "delegate").await;
    assert_eq!(out.reason, StopReason::TextOnly);

    // prompt, assistant(Agent), result, assistant(text)
    assert_eq!(s.messages().len(), 4);
    assert_eq!(result_of(&s, 2), ("there are no files".to_string(), false));

    let ev = drain(&mut rx);
    let updates: Vec<_> = ev
        .iter()
        .filter_map(|e| match e {
            LoopEvent::SubagentUpdate { status, transcript_path, .. } => Some((status.clone(), transcript_path.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(updates.len(), 2);
    assert_eq!(updates[0].0, "started");
    assert_eq!(updates[1].0, "text_only");
    let side = &updates[0].1;
    assert_eq!(
        side.file_name().unwrap().to_string_lossy(),
        format!("{}-agent-1.jsonl", s.session_id())
    );
    let loaded = load_transcript(side).unwrap();
    assert_eq!(loaded.messages.len(), 6);
    assert!(loaded.messages.iter().all(|m| m.is_sidechain));
    let meta: SidechainMeta =
        serde_json::from_str(&std::fs::read_to_string(side.with_extension("meta.json")).unwrap()).unwrap();
    assert_eq!(meta.agent_type, "general-purpose");
    assert_eq!(meta.parent_session, s.session_id());
    assert_eq!(meta.outcome, "text_only");
    assert_eq!(meta.turn_count, 3);

    // Nothing from the child in the parent transcript.
    let parent_text = std::fs::read_to_string(s.transcript_path()).unwrap();
    assert!(!parent_text.contains("isSidechain"));
    // Same engine for both.
    assert_eq!(h.stats.run_turn_calls(), 2);
}

#[tokio::test]
async fn parent_estimate_grows_by_the_result_only() {
    let f = Fixture::new(vec![
        agent("general-purpose", "x").with_input_tokens(100),
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
        ScriptStep::text("summary of a long investigation"),
    ]);
    let h = f.harness().with_rules(vec![allow("Agent"), allow("Glob")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    // Stop right after the Agent dispatch.
    s.max_turns = Some(1);
    turn(&h, &mut s, "go").await;
    let msgs = s.messages();
    assert_eq!(msgs[1].role, Role::Assistant);
    let before = harnesskit::types::estimate_context_tokens(&msgs[..2], 0);
    let after = s.estimate();
    assert_eq!(before, 100);
    assert_eq!(after - before, char_estimate(&msgs[2]));
}

#[tokio::test]
async fn explore_cannot_edit() {
    let f = Fixture::new(vec![
        agent("Explore", "change a.txt"),
        ScriptStep::tool_use("FileEdit", json!({"path": "a.txt", "old_string": "a", "new_string": "b"})),
        ScriptStep::text("could not edit"),
        ScriptStep::text("ok"),
    ]);
    f.write("a.txt", "a");
    let h = f.harness().with_rules(vec![allow("Agent")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    s.set_mode(PermissionMode::BypassPermissions);
    turn(&h, &mut s, "go").await;
    assert_eq!(f.read("a.txt"), "a");
    let side = f
        .paths()
        .projects_root()
        .read_dir()
        .unwrap()
        .flat_map(|d| d.unwrap().path().read_dir().unwrap())
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("-agent-1.jsonl"))
        .unwrap();
    let child = load_transcript(&side).unwrap();
    let ContentBlock::ToolResult { content, is_error, .. } = &child.messages[2].blocks[0] else { panic!() };
    assert!(is_error);
    assert!(content.contains("FileEdit"), "{content}");
    assert_eq!(result_of(&s, 2).0, "could not edit");
}

#[tokio::test]
async fn sidechain_replay_equals_child_state() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
        ScriptStep::text("child answer"),
    ]);
    let h = f.harness().with_rules(vec![allow("Glob")]).into_shared();
    let s = Session::create(&h, &f.project).unwrap();
    let def = builtin_agents().into_iter().find(|d| d.name == "general-purpose").unwrap();
    let run = run_agent(&h, &def, "look", &ParentLink::of(&s, &[]), Isolation::InProcess, CancellationToken::new())
        .await
        .unwrap();
    assert_eq!(run.summary_text, "child answer");
    let loaded = load_transcript(&run.sidechain.transcript_path).unwrap();
    assert_eq!(loaded.messages, run.messages);
    assert!(run.sidechain.meta_path.exists());
}

#[tokio::test]
async fn depth_cap_applies_to_grandchildren() {
    let f = Fixture::new(vec![
        agent("general-purpose", "level 1"),
        agent("general-purpose", "level 2"),
        agent("general-purpose", "level 3"),
        ScriptStep::text("grandchild done"),
        ScriptStep::text("child done"),
        ScriptStep::text("parent done"),
    ]);
    let h = f.harness().with_rules(vec![allow("Agent")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let out = turn(&h, &mut s, "nest").await;
    assert_eq!(out.reason, StopReason::TextOnly);
    assert_eq!(h.stats.run_turn_calls(), 3);
    let grandchild = f
        .paths()
        .projects_root()
        .read_dir()
        .unwrap()
        .flat_map(|d| d.unwrap().path().read_dir().unwrap())
        .map(|e| e.unwrap().path())
        .find(|p| p.to_string_lossy().ends_with("-agent-1-agent-1.jsonl"))
        .unwrap();
    let g = load_transcript(&grandchild).unwrap();
    let ContentBlock::ToolResult { content, is_error, .. } = &g.messages[2].blocks[0] else { panic!() };
    assert!(is_error);
    assert!(content.contains("depth limit"));
}

#[tokio::test]
async fn bubble_asks_reach_the_parent() {
    let f = Fixture::new(vec![
        agent("asker", "run it"),
        ScriptStep::tool_use("Bash", json!({"command": "echo hi"})),
        ScriptStep::text("child done"),
        ScriptStep::text("parent done"),
    ]);
    let mut agents = builtin_agents();
    let mut asker = agents[2].clone();
    asker.name = "asker".into();
    asker.permission_mode = Some(PermissionMode::Bubble);
    asker.source = AgentSource::Project;
    agents.push(asker);
    let resolver = Arc::new(QueueResolver::new(vec![AskAnswer::Allow], AskAnswer::Deny));
    let h = f
        .harness()
        .with_agents(agents)
        .with_rules(vec![allow("Agent")])
        .with_resolver(resolver.clone())
        .into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    turn(&h, &mut s, "go").await;
    let asks: Vec<_> = drain(&mut rx)
        .into_iter()
        .filter_map(|e| match e {
            LoopEvent::PermissionRequest(r) => Some(r),
            _ => None,
        })
        .collect();
    assert_eq!(asks.len(), 1);
    assert_eq!(asks[0].agent.as_deref(), Some("asker"));
    assert_eq!(asks[0].tool_name, "Bash");
    assert_eq!(result_of(&s, 2).0, "child done");
}

fn git(dir: &std::path::Path, args: &[&str]) -> bool {
    Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(args)
        .env("GIT_AUTHOR_NAME", "t")
        .env("GIT_AUTHOR_EMAIL", "t@example.com")
        .env("GIT_COMMITTER_NAME", "t")
        .env("GIT_COMMITTER_EMAIL", "t@example.com")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

#[tokio::test]
async fn worktree_isolation_keeps_parent_tree_clean() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Agent", json!({"subagent_type": "general-purpose", "prompt": "write", "isolation": "worktree"})),
        ScriptStep::tool_use("FileWrite", json!({"path": "new.txt", "content": "child"})),
        ScriptStep::text("wrote it"),
        ScriptStep::text("ok"),
    ]);
    f.write("README", "x");
    if !(git(&f.project, &["init", "-q"]) && git(&f.project, &["add", "."]) && git(&f.project, &["commit", "-qm", "init"])) {
        eprintln!("git unavailable; skipping");
        return;
    }
    let h = f.harness().with_rules(vec![allow("Agent")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    s.set_mode(PermissionMode::AcceptEdits);
    turn(&h, &mut s, "go").await;
    assert_eq!(result_of(&s, 2), ("wrote it".to_string(), false));
    assert!(!f.project.join("new.txt").exists());
    let side = s.transcript_path().with_file_name(format!("{}-agent-1.jsonl", s.session_id()));
    let child = load_transcript(&side).unwrap();
    let ContentBlock::ToolResult { content, is_error, .. } = &child.messages[2].blocks[0] else { panic!() };
    assert!(!is_error, "{content}");
    assert!(content.contains("harnesskit-wt-"), "{content}");
}

#[tokio::test]
async fn worktree_failure_is_an_error_outcome() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Agent", json!({"subagent_type": "general-purpose", "prompt": "w", "isolation": "worktree"})),
        ScriptStep::text("ok"),
    ]);
    // Not a git repository.
    let h = f.harness().with_rules(vec![allow("Agent")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "go").await;
    let (content, is_error) = result_of(&s, 2);
    assert!(is_error);
    assert!(content.contains("worktree"), "{content}");
    assert_eq!(h.stats.run_turn_calls(), 1);
}

/// Sends calls whose system prompt names the child agent to a separate script.
struct Split {
    parent: Arc<ScriptedBackend>,
    child: Arc<ScriptedBackend>,
}

#[async_trait::async_trait]
impl ModelBackend for Split {
    async fn call(&self, call: ModelCall) -> Result<EventStream, BackendError> {
        if call.system_prompt.contains("general-purpose coding agent") {
            self.child.call(call).await
        } else {
            self.parent.call(call).await
        }
    }
}

#[tokio::test]
async fn background_result_arrives_next_turn() {
    let f = Fixture::new(vec![]);
    let parent = Arc::new(ScriptedBackend::new(vec![
        ScriptStep::tool_use("Agent", json!({"subagent_type": "general-purpose", "prompt": "bg", "background": true})),
        ScriptStep::text("parent first"),
        ScriptStep::text("parent second"),
    ]));
    let child = Arc::new(ScriptedBackend::new(vec![ScriptStep::text("bg child finished").with_delay(20)]));
    let backend = Arc::new(Split { parent, child: child.clone() });
    let h = Harness::new(backend, f.paths()).with_rules(vec![allow("Agent")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let out = turn(&h, &mut s, "start").await;
    assert_eq!(out.reason, StopReason::TextOnly);
    assert!(result_of(&s, 2).0.starts_with("Started background agent"));
    s.join_background().await;
    assert_eq!(child.call_count(), 1);
    turn(&h, &mut s, "next").await;
    let texts: Vec<String> = s.messages().iter().map(|m| m.text()).collect();
    let prompt_at = texts.iter().position(|t| t == "next").unwrap();
    assert!(texts[prompt_at + 1].contains("bg child finished"), "{texts:?}");
}

#[tokio::test]
async fn remote_isolation_rejected() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Agent", json!({"subagent_type": "Explore", "prompt": "x", "isolation": "remote"})),
        ScriptStep::text("ok"),
    ]);
    let h = f.harness().with_rules(vec![allow("Agent")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "go").await;
    let (content, is_error) = result_of(&s, 2);
    assert!(is_error && content.contains("remote"));
}

mod common;

use std::sync::Arc;

use common::{drain, kinds, lines, turn, Fixture};
use harnesskit::engine::{
    run_turn, AskAnswer, EngineConfig, LoopEvent, QueueResolver, Session, StaticResolver, StopReason,
};
use harnesskit::hooks::{HookEvent, HookOutput, HookRegistry};
use harnesskit::model::{Injection, ScriptStep};
use harnesskit::permissions::{parse_rule, Effect, PermissionMode, RuleSource};
use harnesskit::persistence::load_transcript;
use harnesskit::types::{validate_chain, ContentBlock, Role};
use serde_json::json;
use tokio_util::sync::CancellationToken;

fn allow(rule: &str) -> harnesskit::permissions::PermissionRule {
    parse_rule(rule, Effect::Allow, RuleSource::Cli).unwrap()
}

#[tokio::test]
async fn text_only_turn() {
    let f = Fixture::new(vec![ScriptStep::text("hello")]);
    let h = f.harness().into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    let out = turn(&h, &mut s, "hi").await;
    assert_eq!(out.reason, StopReason::TextOnly);
    assert_eq!(out.final_text, "hello");
    assert_eq!(f.backend.call_count(), 1);
    let ev = drain(&mut rx);
    assert_eq!(kinds(&ev), ["message:user", "request_start", "message:assistant", "done"]);
    assert!(ev.iter().any(|e| matches!(e, LoopEvent::StreamDelta { text } if text == "hello")));
    // Start meta plus the two messages.
    assert_eq!(lines(&s.transcript_path()).len(), 3);
}

#[tokio::test]
async fn tool_then_text_event_order() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Bash", json!({"command": "echo ok"})),
        ScriptStep::text("done"),
    ]);
    let h = f
        .harness()
        .with_rules(vec![parse_rule("Bash(prefix:echo)", Effect::Allow, RuleSource::Cli).unwrap()])
        .into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    let out = turn(&h, &mut s, "run it").await;
    assert_eq!(out.reason, StopReason::TextOnly);
    assert_eq!(f.backend.call_count(), 2);
    assert_eq!(
        kinds(&drain(&mut rx)),
        [
            "message:user",
            "request_start",
            "message:assistant",
            "message:user",
            "tool_use_summary",
            "request_start",
            "message:assistant",
            "done"
        ]
    );
    let roles: Vec<Role> = s.messages().iter().map(|m| m.role).collect();
    assert_eq!(roles, [Role::User, Role::Assistant, Role::User, Role::Assistant]);
    assert!(s.messages()[2].is_tool_result());
    validate_chain(s.messages()).unwrap();
    // The second call saw the tool result.
    let second = &f.backend.calls()[1];
    assert!(second.messages.iter().any(|m| m.is_tool_result()));
}

#[tokio::test]
async fn max_turns_stops_after_first_dispatch() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
    ]);
    let mut h = f.harness();
    h.config.max_turns = Some(1);
    let h = h.into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let out = turn(&h, &mut s, "loop").await;
    assert_eq!(out.reason, StopReason::MaxTurns);
    assert_eq!(f.backend.call_count(), 1);
}

#[tokio::test]
async fn ask_denied_then_alternative() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Bash", json!({"command": "rm -rf build"})),
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
        ScriptStep::text("ok"),
    ]);
    let resolver = Arc::new(QueueResolver::new(vec![], AskAnswer::Deny));
    let h = f
        .harness()
        .with_rules(vec![allow("Glob")])
        .with_resolver(resolver.clone())
        .into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    let out = turn(&h, &mut s, "clean").await;
    assert_eq!(out.reason, StopReason::TextOnly);
    assert_eq!(resolver.requests().len(), 1);
    let ev = drain(&mut rx);
    assert_eq!(ev.iter().filter(|e| e.kind() == "permission_request").count(), 1);
    let ContentBlock::ToolResult { is_error, .. } = &s.messages()[2].blocks[0] else { panic!() };
    assert!(is_error);
    let ContentBlock::ToolResult { is_error, .. } = &s.messages()[4].blocks[0] else { panic!() };
    assert!(!is_error);
}

#[tokio::test]
async fn always_allow_is_session_scoped() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Bash", json!({"command": "echo a"})),
        ScriptStep::tool_use("Bash", json!({"command": "echo a"})),
        ScriptStep::text("ok"),
        ScriptStep::tool_use("Bash", json!({"command": "echo a"})),
        ScriptStep::text("ok"),
    ]);
    let resolver = Arc::new(QueueResolver::new(vec![AskAnswer::AllowAlways], AskAnswer::Deny));
    let h = f.harness().with_resolver(resolver.clone()).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "one").await;
    assert_eq!(resolver.requests().len(), 1);
    assert_eq!(s.session_rules.len(), 1);
    // Never written to disk.
    assert!(!std::fs::read_to_string(s.transcript_path()).unwrap().contains("allow_always"));

    let (mut r, _) = Session::resume(&h, s.session_id()).unwrap();
    assert!(r.session_rules.is_empty());
    turn(&h, &mut r, "again").await;
    assert_eq!(resolver.requests().len(), 2);
}

#[tokio::test]
async fn output_cap_escalation_limit() {
    let f = Fixture::new(vec![ScriptStep::inject(Injection::OutputCap); 4]);
    let h = f.harness().into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    let out = turn(&h, &mut s, "long").await;
    assert_eq!(out.reason, StopReason::ModelError);
    let caps: Vec<u32> = f.backend.calls().iter().map(|c| c.max_output_tokens).collect();
    let base = EngineConfig::default().max_output_tokens;
    assert_eq!(caps, [base, base * 2, base * 4, base * 8]);
    let ev = drain(&mut rx);
    assert_eq!(ev.iter().filter(|e| e.kind() == "tombstone").count(), 4);
    // Partial messages never reach the transcript.
    assert_eq!(s.messages().len(), 1);
}

#[tokio::test]
async fn output_cap_recovers_within_limit() {
    let mut steps = vec![ScriptStep::inject(Injection::OutputCap); 3];
    steps.push(ScriptStep::text("fits"));
    let f = Fixture::new(steps);
    let h = f.harness().into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    assert_eq!(turn(&h, &mut s, "long").await.reason, StopReason::TextOnly);
    assert_eq!(s.handle.state.recovery_counters.output_token_escalations, 3);
}

#[tokio::test]
async fn reactive_compaction_at_most_once() {
    let f = Fixture::new(vec![
        ScriptStep::text("a").with_input_tokens(10),
        ScriptStep::inject(Injection::PromptTooLong),
        ScriptStep::inject(Injection::PromptTooLong),
    ]);
    let h = f.harness().with_summarizer(Arc::new(harnesskit::model::FixedSummarizer::new("S"))).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "first").await;
    let out = turn(&h, &mut s, "second").await;
    assert_eq!(out.reason, StopReason::PromptTooLong);
    assert_eq!(f.backend.call_count(), 3);
    assert!(s.handle.state.recovery_counters.reactive_compact_attempted);
    assert_eq!(s.handle.state.compaction.auto_compactions, 1);
}

#[tokio::test]
async fn fallback_model_switch() {
    let f = Fixture::new(vec![ScriptStep::inject(Injection::Unavailable), ScriptStep::text("ok")]);
    let mut h = f.harness();
    h.config.fallback_model = Some("backup".into());
    let h = h.into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    assert_eq!(turn(&h, &mut s, "x").await.reason, StopReason::TextOnly);
    let ids: Vec<String> = f.backend.calls().iter().map(|c| c.model_id.clone()).collect();
    assert_eq!(ids, ["default", "backup"]);
}

#[tokio::test]
async fn abort_yields_single_done() {
    let f = Fixture::new(vec![ScriptStep::text("slow").with_delay(5_000)]);
    let h = f.harness().into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    let cancel = CancellationToken::new();
    let c2 = cancel.clone();
    tokio::spawn(async move {
        tokio::time::sleep(std::time::Duration::from_millis(50)).await;
        c2.cancel();
    });
    let out = run_turn(&h, &mut s, "x", cancel).await;
    assert_eq!(out.reason, StopReason::Aborted);
    let ev = drain(&mut rx);
    assert_eq!(ev.iter().filter(|e| e.kind() == "done").count(), 1);
}

#[tokio::test]
async fn user_prompt_hook_blocks() {
    let f = Fixture::new(vec![]);
    let hooks = HookRegistry::new().with_callback(HookEvent::UserPromptSubmit, None, |_, _| {
        Ok(HookOutput {
            continue_: Some(false),
            ..Default::default()
        })
    });
    let h = f.harness().with_hooks(hooks).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let out = turn(&h, &mut s, "x").await;
    assert_eq!(out.reason, StopReason::HookStopped);
    assert_eq!(f.backend.call_count(), 0);
}

#[tokio::test]
async fn post_hook_stop_ends_turn() {
    let f = Fixture::new(vec![ScriptStep::tool_use("Glob", json!({"pattern": "*"})), ScriptStep::text("never")]);
    let hooks = HookRegistry::new().with_callback(HookEvent::PostToolUse, None, |_, _| {
        Ok(HookOutput {
            continue_: Some(false),
            ..Default::default()
        })
    });
    let h = f.harness().with_rules(vec![allow("Glob")]).with_hooks(hooks).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    assert_eq!(turn(&h, &mut s, "x").await.reason, StopReason::HookStopped);
    assert_eq!(f.backend.call_count(), 1);
}

#[tokio::test]
async fn edits_are_checkpointed_and_rewindable() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("FileEdit", json!({"path": "a.txt", "old_string": "one", "new_string": "two"})),
        ScriptStep::text("edited"),
    ]);
    f.write("a.txt", "one\n");
    let h = f.harness().into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    s.set_mode(PermissionMode::AcceptEdits);
    turn(&h, &mut s, "edit").await;
    assert_eq!(f.read("a.txt"), "two\n");
    assert_eq!(s.checkpoints().len(), 1);
    let loaded = load_transcript(&s.transcript_path()).unwrap();
    assert_eq!(loaded.checkpoints, s.checkpoints());
    s.rewind_files(None).unwrap();
    assert_eq!(f.read("a.txt"), "one\n");
}

#[tokio::test]
async fn resume_restores_state() {
    let f = Fixture::new(vec![
        ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
        ScriptStep::text("first"),
        ScriptStep::text("second"),
    ]);
    let h = f.harness().into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "one").await;
    let (mut r, notes) = Session::resume(&h, s.session_id()).unwrap();
    assert!(notes.is_empty());
    assert_eq!(r.messages(), s.messages());
    turn(&h, &mut r, "two").await;
    validate_chain(r.messages()).unwrap();
    assert_eq!(r.messages().len(), 6);
}

#[tokio::test]
async fn fork_is_independent() {
    let f = Fixture::new(vec![ScriptStep::text("a"), ScriptStep::text("b")]);
    let h = f.harness().into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "one").await;
    let before = lines(&s.transcript_path());
    let (mut fork, _) = Session::fork(&h, s.session_id(), None).unwrap();
    assert_ne!(fork.session_id(), s.session_id());
    assert_eq!(fork.messages(), s.messages());
    turn(&h, &mut fork, "two").await;
    assert_eq!(lines(&s.transcript_path()), before);
}

#[tokio::test]
async fn instruction_files_reach_the_model() {
    let f = Fixture::new(vec![ScriptStep::tool_use("FileRead", json!({"path": "pkg/x.rs"})), ScriptStep::text("ok")]);
    f.write("CLAUDE.md", "ROOT-RULE");
    f.write("pkg/CLAUDE.md", "PKG-RULE");
    f.write("pkg/x.rs", "fn main() {}");
    let h = f.harness().with_rules(vec![allow("FileRead")]).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "read").await;
    let calls = f.backend.calls();
    assert!(calls[0].messages[0].text().contains("ROOT-RULE"));
    assert!(!calls[0].system_prompt.contains("ROOT-RULE"));
    let all: String = calls[1].messages.iter().map(|m| m.text()).collect();
    assert!(all.contains("PKG-RULE"));
    assert!(!calls[0].messages.iter().any(|m| m.text().contains("PKG-RULE")));
}

#[tokio::test]
async fn auto_compaction_in_loop() {
    let f = Fixture::new(vec![
        ScriptStep::text("a").with_input_tokens(950),
        ScriptStep::text("b"),
    ]);
    let h = f
        .harness()
        .with_compaction(harnesskit::config::CompactionConfig {
            window_tokens: 1_000,
            ..Default::default()
        })
        .with_summarizer(Arc::new(harnesskit::model::FixedSummarizer::new("SUMMARY")))
        .into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    let mut rx = s.events.subscribe();
    turn(&h, &mut s, "one").await;
    turn(&h, &mut s, "two").await;
    assert_eq!(s.handle.state.compaction.auto_compactions, 1);
    let second = &f.backend.calls()[1];
    assert!(second.messages.iter().any(|m| m.text() == "SUMMARY"));
    let traces: Vec<_> = drain(&mut rx)
        .into_iter()
        .filter_map(|e| match e {
            LoopEvent::RequestStart { trace, .. } => Some(trace),
            _ => None,
        })
        .collect();
    assert!(traces[1][4].applied);
    let (r, _) = Session::resume(&h, s.session_id()).unwrap();
    assert_eq!(r.messages(), s.messages());
}

#[tokio::test]
async fn static_resolver_allow() {
    let f = Fixture::new(vec![ScriptStep::tool_use("Bash", json!({"command": "echo hi"})), ScriptStep::text("ok")]);
    let h = f.harness().with_resolver(Arc::new(StaticResolver(AskAnswer::Allow))).into_shared();
    let mut s = Session::create(&h, &f.project).unwrap();
    turn(&h, &mut s, "x").await;
    let ContentBlock::ToolResult { content, is_error, .. } = &s.messages()[2].blocks[0] else { panic!() };
    assert!(!is_error, "{content}");
    assert!(content.contains("hi"));
}

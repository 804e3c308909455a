//! The five shapers on a long synthetic history with a small window.

use harnesskit::compaction::{run_shapers, CollapseStore, ShaperContext};
use harnesskit::config::CompactionConfig;
use harnesskit::hooks::HookRegistry;
use harnesskit::model::FixedSummarizer;
use harnesskit::types::{estimate_context_tokens, ContentBlock, Message, Role};
use serde_json::json;

#[tokio::main]
async fn main() {
    let mut history = Vec::new();
    for i in 0..40 {
        history.push(Message::user_text(format!("step {i}: keep going")));
        history.push(Message::new(
            Role::Assistant,
            vec![ContentBlock::ToolUse { id: format!("t{i}"), name: "Bash".into(), input: json!({"command": "make test"}) }],
        ));
        let log = format!("test output line {i}\n").repeat(60);
        history.push(Message::new(Role::User, vec![ContentBlock::tool_result(format!("t{i}"), log, false)]));
        history.push(Message::assistant_text(format!("step {i} passed")));
    }
    println!("messages: {}, estimate: {}", history.len(), estimate_context_tokens(&history, 0));

    for window in [200_000, 2_000] {
        let cfg = CompactionConfig { window_tokens: window, ..CompactionConfig::default() };
        let summarizer = FixedSummarizer::new("Ran `make test` forty times; all steps passed.");
        let report = run_shapers(
            history.clone(),
            ShaperContext {
                cfg: &cfg,
                caps: &|_| Some(20_000),
                collapse_store: &CollapseStore::default(),
                summarizer: &summarizer,
                hooks: &HookRegistry::new(),
                hook_payload: json!({}),
                attachments: Vec::new(),
                compact_prompt: "Summarize the conversation so far.",
                snip_tokens_freed: 0,
                force_compact: false,
                trigger: "auto",
            },
        )
        .await;
        println!("\nwindow {window} (threshold {:.0})", cfg.threshold_tokens());
        for t in &report.trace {
            println!(
                "  {:<13} enabled={:<5} applied={:<5} {:>6} -> {:>6}",
                format!("{:?}", t.shaper),
                t.enabled,
                t.applied,
                t.tokens_before,
                t.tokens_after
            );
        }
        println!("  auto_compacted={} view={} messages", report.auto_compacted, report.view.len());
    }
}

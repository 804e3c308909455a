//! The event grammar every backend emits, folded into one assistant message.

use std::sync::Arc;

use futures::StreamExt;
use harnesskit::model::{collect_response, ModelBackend, ModelCall, ScriptStep, ScriptedBackend};
use harnesskit::types::Message;
use serde_json::json;
use tokio_util::sync::CancellationToken;

fn call(messages: Vec<Message>) -> ModelCall {
    ModelCall {
        system_prompt: "You are terse.".into(),
        messages,
        tools: Vec::new(),
        thinking: None,
        model_id: "scripted".into(),
        max_output_tokens: 1024,
        abort: CancellationToken::new(),
    }
}

#[tokio::main]
async fn main() {
    let backend: Arc<dyn ModelBackend> = Arc::new(ScriptedBackend::new(vec![
        ScriptStep::tool_use("Glob", json!({"pattern": "*.rs"})).with_text("Let me look.").with_input_tokens(321),
        ScriptStep::text("All done."),
    ]));

    let mut raw = backend.call(call(vec![Message::user_text("list rust files")])).await.unwrap();
    println!("raw events:");
    while let Some(ev) = raw.next().await {
        println!("  {}", serde_json::to_string(&ev.unwrap()).unwrap());
    }

    let stream = backend.call(call(vec![Message::user_text("and now?")])).await.unwrap();
    let mut deltas = String::new();
    let resp = collect_response(stream, &CancellationToken::new(), &mut |d| deltas.push_str(d)).await.unwrap();
    println!("\nstreamed text: {deltas:?}");
    println!("folded: {resp:?}");

    match harnesskit::model::HttpBackend::from_env() {
        Some(_) => println!("\nHARNESS_API_URL is set; the HTTP backend is available"),
        None => println!("\nHARNESS_API_URL is unset; only the scripted backend is available"),
    }
}

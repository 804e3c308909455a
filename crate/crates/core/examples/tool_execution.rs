//! Concurrent-safe calls share a batch, exclusive ones run alone, results keep request order.

use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::StreamExt;
use harnesskit::tools::{
    execute_streaming, partition_tool_calls, Concurrency, Tool, ToolContext, ToolOrigin, ToolOutcome, ToolPool,
    ToolRequest, ToolSpec,
};
use serde_json::json;

struct Sleep(&'static str, Concurrency);

#[async_trait]
impl Tool for Sleep {
    fn spec(&self) -> ToolSpec {
        let mut s = ToolSpec::new(self.0, "sleeps for `ms`", ToolOrigin::Builtin);
        s.concurrency = self.1;
        s
    }

    async fn invoke(&self, req: &ToolRequest, _ctx: &ToolContext) -> ToolOutcome {
        let ms = req.input["ms"].as_u64().unwrap_or(0);
        tokio::time::sleep(Duration::from_millis(ms)).await;
        ToolOutcome::ok(&req.tool_use_id, format!("{} slept {ms}ms", self.0))
    }
}

#[tokio::main]
async fn main() {
    let pool = ToolPool::new(vec![
        Arc::new(Sleep("Read", Concurrency::ConcurrentSafe)),
        Arc::new(Sleep("Write", Concurrency::Exclusive)),
    ]);
    let reqs = vec![
        ToolRequest::new("a", "Read", json!({"ms": 60})),
        ToolRequest::new("b", "Read", json!({"ms": 10})),
        ToolRequest::new("c", "Write", json!({"ms": 20})),
        ToolRequest::new("d", "Read", json!({"ms": 5})),
    ];
    let batches: Vec<Vec<String>> = partition_tool_calls(&reqs, &pool)
        .into_iter()
        .map(|b| b.into_iter().map(|r| r.tool_use_id).collect())
        .collect();
    println!("batches: {batches:?}");

    let ctx = ToolContext::new(std::env::temp_dir());
    let start = Instant::now();
    let mut outs = execute_streaming(reqs, &pool, &ctx);
    while let Some(o) = outs.next().await {
        println!("{:>4}ms  {}  {}", start.elapsed().as_millis(), o.tool_use_id, o.content);
    }
}

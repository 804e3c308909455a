use futures::stream::{self, BoxStream, FuturesOrdered, StreamExt};
use tokio_util::sync::CancellationToken;

use super::{validate_input, Concurrency, ToolContext, ToolOutcome, ToolPool, ToolRequest};

pub const SIBLING_ABORT: &str = "sibling_abort";

/// Greedy, order-preserving: runs of concurrent-safe requests share a batch,
/// everything else (exclusive or unknown) is a singleton.
pub fn partition_tool_calls(requests: &[ToolRequest], pool: &ToolPool) -> Vec<Vec<ToolRequest>> {
    let mut batches: Vec<(bool, Vec<ToolRequest>)> = Vec::new();
    for req in requests {
        let safe = pool
            .spec(&req.tool_name)
            .is_some_and(|s| s.concurrency == Concurrency::ConcurrentSafe);
        match batches.last_mut() {
            Some((true, batch)) if safe => batch.push(req.clone()),
            _ => batches.push((safe, vec![req.clone()])),
        }
    }
    batches.into_iter().map(|(_, b)| b).collect()
}

/// Run `requests` batch by batch, yielding outcomes strictly in request order.
///
/// A failing Bash call cancels every sibling still running or not yet started
/// within this call; those report `sibling_abort`.
pub fn execute_streaming<'a>(
    requests: Vec<ToolRequest>,
    pool: &'a ToolPool,
    ctx: &'a ToolContext,
) -> BoxStream<'a, ToolOutcome> {
    let sibling = ctx.cancel.child_token();
    let batches = partition_tool_calls(&requests, pool);
    stream::iter(batches)
        .flat_map(move |batch| {
            let mut ordered = FuturesOrdered::new();
            for req in batch {
                ordered.push_back(run_one(req, pool, ctx, sibling.clone()));
            }
            ordered
        })
        .boxed()
}

fn cancelled_outcome(req: &ToolRequest, ctx: &ToolContext) -> ToolOutcome {
    if ctx.cancel.is_cancelled() {
        ToolOutcome::error(&req.tool_use_id, "tool call aborted").with_reason("aborted")
    } else {
        ToolOutcome::error(&req.tool_use_id, "cancelled because a sibling Bash call failed").with_reason(SIBLING_ABORT)
    }
}

async fn run_one(req: ToolRequest, pool: &ToolPool, ctx: &ToolContext, sibling: CancellationToken) -> ToolOutcome {
    if sibling.is_cancelled() {
        return cancelled_outcome(&req, ctx);
    }
    let Some(tool) = pool.get(&req.tool_name) else {
        return ToolOutcome::error(&req.tool_use_id, format!("unknown tool `{}`", req.tool_name)).with_reason("unknown_tool");
    };
    if let Err(e) = validate_input(&tool.spec().input_schema, &req.input) {
        return ToolOutcome::error(&req.tool_use_id, format!("invalid input: {e}")).with_reason("schema");
    }
    let mut call_ctx = ctx.clone();
    call_ctx.cancel = sibling.clone();
    let outcome = tokio::select! {
        biased;
        out = tool.invoke(&req, &call_ctx) => out,
        _ = sibling.cancelled() => cancelled_outcome(&req, ctx),
    };
    if req.tool_name == "Bash" && outcome.is_error && outcome.reason.is_none() {
        sibling.cancel();
    }
    outcome
}

//! Provider-neutral streaming model contract, a deterministic scripted
//! backend and an HTTP adapter.

mod http;
mod scripted;
mod summarize;

use async_trait::async_trait;
use futures::stream::BoxStream;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio_util::sync::CancellationToken;

use crate::tools::ToolSpec;
use crate::types::{ContentBlock, Message, Role, TokenUsage};

pub use http::HttpBackend;
pub use scripted::{Injection, ScriptStep, ScriptToolUse, ScriptedBackend};
pub use summarize::{BackendSummarizer, FixedSummarizer, Summarizer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThinkingConfig {
    pub budget_tokens: u32,
}

/// Everything one model request carries. `messages` are already shaped and
/// have the user-context message in front.
#[derive(Debug, Clone)]
pub struct ModelCall {
    pub system_prompt: String,
    pub messages: Vec<Message>,
    pub tools: Vec<ToolSpec>,
    pub thinking: Option<ThinkingConfig>,
    pub model_id: String,
    pub max_output_tokens: u32,
    pub abort: CancellationToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockKind {
    Text,
    Thinking,
    /// Input arrives as JSON text in the block's deltas.
    ToolUse { id: String, name: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendEvent {
    BlockStart { index: usize, block: BlockKind },
    Delta { index: usize, text: String },
    BlockStop { index: usize },
    Usage { usage: TokenUsage },
    ErrorOutputCap,
    ErrorPromptTooLong,
    End,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("script exhausted after {0} calls")]
    ScriptExhausted(usize),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("aborted")]
    Aborted,
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Unavailable(_) | BackendError::Transport(_))
    }
}

pub type EventStream = BoxStream<'static, Result<BackendEvent, BackendError>>;

#[async_trait]
pub trait ModelBackend: Send + Sync {
    async fn call(&self, call: ModelCall) -> Result<EventStream, BackendError>;
}

/// How one streamed response ended.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelResponse {
    Complete(Message),
    /// The output cap was hit; the partial message is discarded by the loop.
    OutputCapHit(Message),
    PromptTooLong,
}

struct OpenBlock {
    kind: BlockKind,
    buf: String,
}

/// Fold a backend stream into one assistant message, enforcing the event
/// grammar `(block_start delta* block_stop)* usage? end | error`.
pub async fn collect_response(
    mut stream: EventStream,
    abort: &CancellationToken,
    on_delta: &mut (dyn FnMut(&str) + Send),
) -> Result<ModelResponse, BackendError> {
    let mut open: Vec<Option<OpenBlock>> = Vec::new();
    let mut blocks: Vec<(usize, ContentBlock)> = Vec::new();
    let mut usage = None;
    loop {
        let next = tokio::select! {
            biased;
            _ = abort.cancelled() => return Err(BackendError::Aborted),
            n = stream.next() => n,
        };
        let Some(ev) = next else {
            return Err(BackendError::Protocol("stream ended without end event".into()));
        };
        match ev? {
            BackendEvent::BlockStart { index, block } => {
                if open.len() <= index {
                    open.resize_with(index + 1, || None);
                }
                if open[index].is_some() {
                    return Err(BackendError::Protocol(format!("block {index} started twice")));
                }
                open[index] = Some(OpenBlock { kind: block, buf: String::new() });
            }
            BackendEvent::Delta { index, text } => {
                let b = open
                    .get_mut(index)
                    .and_then(Option::as_mut)
                    .ok_or_else(|| BackendError::Protocol(format!("delta for unopened block {index}")))?;
                if !matches!(b.kind, BlockKind::ToolUse { .. }) {
                    on_delta(&text);
                }
                b.buf.push_str(&text);
            }
            BackendEvent::BlockStop { index } => {
                let b = open
                    .get_mut(index)
                    .and_then(Option::take)
                    .ok_or_else(|| BackendError::Protocol(format!("stop for unopened block {index}")))?;
                blocks.push((index, close_block(b)?));
            }
            BackendEvent::Usage { usage: u } => usage = Some(u),
            BackendEvent::ErrorOutputCap => {
                blocks.sort_by_key(|(i, _)| *i);
                let mut m = Message::new(Role::Assistant, blocks.into_iter().map(|(_, b)| b).collect());
                m.usage = usage;
                return Ok(ModelResponse::OutputCapHit(m));
            }
            BackendEvent::ErrorPromptTooLong => return Ok(ModelResponse::PromptTooLong),
            BackendEvent::End => {
                if open.iter().any(Option::is_some) {
                    return Err(BackendError::Protocol("end with unterminated block".into()));
                }
                blocks.sort_by_key(|(i, _)| *i);
                let mut m = Message::new(Role::Assistant, blocks.into_iter().map(|(_, b)| b).collect());
                m.usage = usage;
                return Ok(ModelResponse::Complete(m));
            }
        }
    }
}

fn close_block(b: OpenBlock) -> Result<ContentBlock, BackendError> {
    Ok(match b.kind {
        BlockKind::Text => ContentBlock::Text { text: b.buf },
        BlockKind::Thinking => ContentBlock::Thinking { thinking: b.buf },
        BlockKind::ToolUse { id, name } => {
            let input = if b.buf.trim().is_empty() {
                serde_json::json!({})
            } else {
                serde_json::from_str(&b.buf).map_err(|e| BackendError::Protocol(format!("tool input for {id}: {e}")))?
            };
            ContentBlock::ToolUse { id, name, input }
        }
    })
}

/// Events for one finished message, in stream order. Shared by the scripted
/// backend and tests that exercise the grammar.
pub fn message_events(blocks: &[ContentBlock], usage: TokenUsage) -> Vec<BackendEvent> {
    let mut evs = Vec::new();
    for (index, b) in blocks.iter().enumerate() {
        let (block, text) = match b {
            ContentBlock::Text { text } => (BlockKind::Text, text.clone()),
            ContentBlock::Thinking { thinking } => (BlockKind::Thinking, thinking.clone()),
            ContentBlock::ToolUse { id, name, input } => (
                BlockKind::ToolUse {
                    id: id.clone(),
                    name: name.clone(),
                },
                input.to_string(),
            ),
            ContentBlock::ToolResult { .. } => continue,
        };
        evs.push(BackendEvent::BlockStart { index, block });
        if !text.is_empty() {
            evs.push(BackendEvent::Delta { index, text });
        }
        evs.push(BackendEvent::BlockStop { index });
    }
    evs.push(BackendEvent::Usage { usage });
    evs.push(BackendEvent::End);
    evs
}

/// Conversation as the provider sees it: system notes and boundary markers
/// are dropped and attachments are framed as user turns.
pub fn normalize_for_model(messages: &[Message]) -> Vec<Message> {
    messages
        .iter()
        .filter(|m| m.role != Role::System)
        .map(|m| {
            let mut m = m.clone();
            if m.role == Role::Attachment {
                m.role = Role::User;
            }
            m
        })
        .collect()
}

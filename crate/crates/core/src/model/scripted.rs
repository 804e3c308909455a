use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{message_events, BackendError, BackendEvent, BlockKind, EventStream, ModelBackend, ModelCall};
use crate::types::{char_estimate, ContentBlock, TokenUsage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    OutputCap,
    PromptTooLong,
    Unavailable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptToolUse {
    pub name: String,
    #[serde(default = "empty_object")]
    pub input: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

/// One scripted model response. Blocks are emitted thinking, text, tool uses.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptStep {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thinking: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_use: Option<ScriptToolUse>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_uses: Vec<ScriptToolUse>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inject: Option<Injection>,
    /// Reported `usage.input_tokens`; defaults to the char estimate of the call.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay_ms: Option<u64>,
}

impl ScriptStep {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptStep {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn tool_use(name: impl Into<String>, input: Value) -> Self {
        ScriptStep {
            tool_use: Some(ScriptToolUse {
                name: name.into(),
                input,
                id: None,
            }),
            ..Default::default()
        }
    }

    pub fn tool_uses(uses: Vec<(&str, Value)>) -> Self {
        ScriptStep {
            tool_uses: uses
                .into_iter()
                .map(|(n, input)| ScriptToolUse {
                    name: n.to_string(),
                    input,
                    id: None,
                })
                .collect(),
            ..Default::default()
        }
    }

    pub fn inject(i: Injection) -> Self {
        ScriptStep {
            inject: Some(i),
            ..Default::default()
        }
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = Some(text.into());
        self
    }

    pub fn with_input_tokens(mut self, n: u64) -> Self {
        self.input_tokens = Some(n);
        self
    }

    pub fn with_delay(mut self, ms: u64) -> Self {
        self.delay_ms = Some(ms);
        self
    }
}

/// Plays back a fixed list of responses and records every call it receives.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    steps: Mutex<Vec<ScriptStep>>,
    cursor: AtomicUsize,
    next_tool_id: AtomicUsize,
    calls: Mutex<Vec<ModelCall>>,
}

impl ScriptedBackend {
    pub fn new(steps: Vec<ScriptStep>) -> Self {
        ScriptedBackend {
            steps: Mutex::new(steps),
            ..Default::default()
        }
    }

    /// A JSON array of steps, as stored under `test-data/`.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        Ok(Self::new(serde_json::from_str(text)?))
    }

    pub fn push(&self, step: ScriptStep) {
        self.steps.lock().unwrap().push(step);
    }

    pub fn calls(&self) -> Vec<ModelCall> {
        self.calls.lock().unwrap().clone()
    }

    pub fn call_count(&self) -> usize {
        self.calls.lock().unwrap().len()
    }

    pub fn remaining(&self) -> usize {
        self.steps.lock().unwrap().len().saturating_sub(self.cursor.load(Ordering::SeqCst))
    }

    fn tool_id(&self, explicit: &Option<String>) -> String {
        explicit
            .clone()
            .unwrap_or_else(|| format!("toolu_{:04}", self.next_tool_id.fetch_add(1, Ordering::SeqCst) + 1))
    }
}

#[async_trait]
impl ModelBackend for ScriptedBackend {
    async fn call(&self, call: ModelCall) -> Result<EventStream, BackendError> {
        let n = {
            let mut calls = self.calls.lock().unwrap();
            calls.push(call.clone());
            calls.len()
        };
        let idx = self.cursor.fetch_add(1, Ordering::SeqCst);
        let step = self
            .steps
            .lock()
            .unwrap()
            .get(idx)
            .cloned()
            .ok_or(BackendError::ScriptExhausted(n - 1))?;
        if let Some(ms) = step.delay_ms {
            tokio::select! {
                _ = tokio::time::sleep(Duration::from_millis(ms)) => {}
                _ = call.abort.cancelled() => return Err(BackendError::Aborted),
            }
        }
        let input_tokens = step
            .input_tokens
            .unwrap_or_else(|| call.messages.iter().map(char_estimate).sum());
        let events: Vec<BackendEvent> = match step.inject {
            Some(Injection::Unavailable) => return Err(BackendError::Unavailable("scripted outage".into())),
            Some(Injection::PromptTooLong) => vec![BackendEvent::ErrorPromptTooLong],
            Some(Injection::OutputCap) => {
                let partial = step.text.clone().unwrap_or_else(|| "partial".into());
                vec![
                    BackendEvent::BlockStart { index: 0, block: BlockKind::Text },
                    BackendEvent::Delta { index: 0, text: partial },
                    BackendEvent::ErrorOutputCap,
                ]
            }
            None => {
                let mut blocks = Vec::new();
                if let Some(t) = &step.thinking {
                    blocks.push(ContentBlock::Thinking { thinking: t.clone() });
                }
                if let Some(t) = &step.text {
                    blocks.push(ContentBlock::text(t.clone()));
                }
                for tu in step.tool_use.iter().chain(step.tool_uses.iter()) {
                    blocks.push(ContentBlock::ToolUse {
                        id: self.tool_id(&tu.id),
                        name: tu.name.clone(),
                        input: tu.input.clone(),
                    });
                }
                let out_chars: usize = blocks.iter().map(ContentBlock::serialized_chars).sum();
                let usage = TokenUsage {
                    input_tokens,
                    output_tokens: out_chars.div_ceil(4) as u64,
                };
                message_events(&blocks, usage)
            }
        };
        Ok(futures::stream::iter(events.into_iter().map(Ok)).boxed())
    }
}

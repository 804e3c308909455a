use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use tokio_util::sync::CancellationToken;

use super::{collect_response, normalize_for_model, BackendError, ModelBackend, ModelCall, ModelResponse};
use crate::types::Message;

/// Produces the compaction summary text.
#[async_trait]
pub trait Summarizer: Send + Sync {
    async fn summarize(&self, messages: &[Message], compact_prompt: &str) -> Result<String, BackendError>;
}

/// One tool-less backend call: the conversation followed by the compact prompt.
pub struct BackendSummarizer {
    backend: Arc<dyn ModelBackend>,
    model_id: String,
    max_output_tokens: u32,
}

impl BackendSummarizer {
    pub fn new(backend: Arc<dyn ModelBackend>, model_id: impl Into<String>) -> Self {
        BackendSummarizer {
            backend,
            model_id: model_id.into(),
            max_output_tokens: 8_192,
        }
    }
}

#[async_trait]
impl Summarizer for BackendSummarizer {
    async fn summarize(&self, messages: &[Message], compact_prompt: &str) -> Result<String, BackendError> {
        let mut msgs = normalize_for_model(messages);
        msgs.push(Message::user_text(compact_prompt));
        let abort = CancellationToken::new();
        let stream = self
            .backend
            .call(ModelCall {
                system_prompt: "You summarize conversations for context compaction.".into(),
                messages: msgs,
                tools: Vec::new(),
                thinking: None,
                model_id: self.model_id.clone(),
                max_output_tokens: self.max_output_tokens,
                abort: abort.clone(),
            })
            .await?;
        match collect_response(stream, &abort, &mut |_| {}).await? {
            ModelResponse::Complete(m) => Ok(m.text()),
            ModelResponse::OutputCapHit(_) => Err(BackendError::Protocol("summary hit the output cap".into())),
            ModelResponse::PromptTooLong => Err(BackendError::Protocol("summary prompt too long".into())),
        }
    }
}

/// Returns a fixed summary (or fails) and records the prompts it was given.
#[derive(Debug, Default)]
pub struct FixedSummarizer {
    text: Option<String>,
    prompts: Mutex<Vec<String>>,
    inputs: Mutex<Vec<usize>>,
}

impl FixedSummarizer {
    pub fn new(text: impl Into<String>) -> Self {
        FixedSummarizer {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn failing() -> Self {
        FixedSummarizer::default()
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().unwrap().clone()
    }

    /// Number of messages passed to each call.
    pub fn input_sizes(&self) -> Vec<usize> {
        self.inputs.lock().unwrap().clone()
    }
}

#[async_trait]
impl Summarizer for FixedSummarizer {
    async fn summarize(&self, messages: &[Message], compact_prompt: &str) -> Result<String, BackendError> {
        self.prompts.lock().unwrap().push(compact_prompt.to_string());
        self.inputs.lock().unwrap().push(messages.len());
        self.text
            .clone()
            .ok_or_else(|| BackendError::Unavailable("summarizer configured to fail".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ScriptStep, ScriptedBackend};

    #[tokio::test]
    async fn backend_summarizer_sends_prompt_last() {
        let backend = Arc::new(ScriptedBackend::new(vec![ScriptStep::text("SUMMARY")]));
        let s = BackendSummarizer::new(backend.clone(), "m");
        let out = s.summarize(&[Message::user_text("hello")], "Summarize. extra").await.unwrap();
        assert_eq!(out, "SUMMARY");
        let call = &backend.calls()[0];
        assert_eq!(call.messages.last().unwrap().text(), "Summarize. extra");
        assert!(call.tools.is_empty());
    }

    #[tokio::test]
    async fn fixed_summarizer_records_and_fails() {
        let f = FixedSummarizer::new("S");
        assert_eq!(f.summarize(&[], "p").await.unwrap(), "S");
        assert_eq!(f.prompts(), vec!["p"]);
        assert!(FixedSummarizer::failing().summarize(&[], "p").await.is_err());
    }
}

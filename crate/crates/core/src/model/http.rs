use async_trait::async_trait;
use futures::StreamExt;
use serde_json::{json, Value};

use super::{normalize_for_model, BackendError, BackendEvent, EventStream, ModelBackend, ModelCall};
use crate::types::Role;

/// POSTs a provider-neutral JSON request and reads back newline-delimited
/// [`BackendEvent`] frames.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, api_key: Option<String>) -> Self {
        HttpBackend {
            url: url.into(),
            api_key,
            client: reqwest::Client::new(),
        }
    }

    /// `HARNESS_API_URL` (required) and `HARNESS_API_KEY`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("HARNESS_API_URL").ok()?;
        Some(Self::new(url, std::env::var("HARNESS_API_KEY").ok()))
    }

    pub fn request_body(call: &ModelCall) -> Value {
        let messages: Vec<Value> = normalize_for_model(&call.messages)
            .iter()
            .map(|m| {
                json!({
                    "role": if m.role == Role::Assistant { "assistant" } else { "user" },
                    "content": m.blocks,
                })
            })
            .collect();
        let tools: Vec<Value> = call
            .tools
            .iter()
            .map(|t| json!({"name": t.name, "description": t.description, "input_schema": t.input_schema}))
            .collect();
        json!({
            "model": call.model_id,
            "system": call.system_prompt,
            "messages": messages,
            "tools": tools,
            "max_output_tokens": call.max_output_tokens,
            "thinking": call.thinking,
            "stream": true,
        })
    }
}

#[async_trait]
impl ModelBackend for HttpBackend {
    async fn call(&self, call: ModelCall) -> Result<EventStream, BackendError> {
        let mut req = self.client.post(&self.url).json(&Self::request_body(&call));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = tokio::select! {
            r = req.send() => r.map_err(|e| BackendError::Unavailable(e.to_string()))?,
            _ = call.abort.cancelled() => return Err(BackendError::Aborted),
        };
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(BackendError::Unavailable(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(BackendError::Transport(format!("status {status}")));
        }
        let bytes = resp.bytes_stream();
        // Split the body into lines, carrying partial lines across chunks.
        let stream = futures::stream::unfold((bytes, Vec::<u8>::new(), false), |(mut bytes, mut buf, mut eof)| async move {
            loop {
                if let Some(nl) = buf.iter().position(|b| *b == b'\n') {
                    let line: Vec<u8> = buf.drain(..=nl).collect();
                    let text = String::from_utf8_lossy(&line);
                    if text.trim().is_empty() {
                        continue;
                    }
                    let ev = serde_json::from_str::<BackendEvent>(text.trim())
                        .map_err(|e| BackendError::Protocol(format!("bad frame: {e}")));
                    return Some((ev, (bytes, buf, eof)));
                }
                if eof {
                    if buf.iter().all(u8::is_ascii_whitespace) {
                        return None;
                    }
                    buf.push(b'\n');
                    continue;
                }
                match bytes.next().await {
                    Some(Ok(chunk)) => buf.extend_from_slice(&chunk),
                    Some(Err(e)) => return Some((Err(BackendError::Transport(e.to_string())), (bytes, Vec::new(), true))),
                    None => eof = true,
                }
            }
        });
        Ok(stream.boxed())
    }
}

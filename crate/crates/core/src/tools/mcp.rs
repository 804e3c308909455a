//! MCP client over stdio: newline-delimited JSON-RPC 2.0.

use std::collections::{BTreeMap, HashMap};
use std::process::Stdio;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::process::{Child, ChildStdin};
use tokio::sync::oneshot;

use super::{Tool, ToolContext, ToolOrigin, ToolOutcome, ToolRequest, ToolSpec};
use crate::error::{Error, Result};
use crate::types::Notification;

pub const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const CALL_TIMEOUT: Duration = Duration::from_secs(120);
const PROTOCOL_VERSION: &str = "2024-11-05";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct McpServerSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

/// Waiters keyed by request id; `None` once the server's stdout has closed.
type Pending = Arc<Mutex<Option<HashMap<u64, oneshot::Sender<std::result::Result<Value, String>>>>>>;

pub struct McpClient {
    name: String,
    stdin: tokio::sync::Mutex<ChildStdin>,
    pending: Pending,
    next_id: AtomicU64,
    _child: Mutex<Child>,
}

impl McpClient {
    pub fn name(&self) -> &str {
        &self.name
    }

    async fn send(&self, msg: &Value) -> Result<()> {
        let mut line = serde_json::to_string(msg)?;
        line.push('\n');
        let mut stdin = self.stdin.lock().await;
        stdin
            .write_all(line.as_bytes())
            .await
            .map_err(|e| Error::Mcp(format!("{}: write failed: {e}", self.name)))?;
        stdin.flush().await.map_err(|e| Error::Mcp(format!("{}: flush failed: {e}", self.name)))
    }

    pub async fn request(&self, method: &str, params: Value, timeout: Duration) -> Result<Value> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (tx, rx) = oneshot::channel();
        match self.pending.lock().expect("pending lock").as_mut() {
            Some(map) => map.insert(id, tx),
            None => return Err(Error::Mcp(format!("{}: server closed the connection", self.name))),
        };
        self.send(&json!({"jsonrpc": "2.0", "id": id, "method": method, "params": params})).await?;
        match tokio::time::timeout(timeout, rx).await {
            Err(_) => {
                if let Some(map) = self.pending.lock().expect("pending lock").as_mut() {
                    map.remove(&id);
                }
                Err(Error::Mcp(format!("{}: {method} timed out", self.name)))
            }
            Ok(Err(_)) => Err(Error::Mcp(format!("{}: server closed the connection", self.name))),
            Ok(Ok(Err(e))) => Err(Error::Mcp(format!("{}: {method} failed: {e}", self.name))),
            Ok(Ok(Ok(v))) => Ok(v),
        }
    }

    pub async fn notify(&self, method: &str, params: Value) -> Result<()> {
        self.send(&json!({"jsonrpc": "2.0", "method": method, "params": params})).await
    }

    pub async fn call_tool(&self, tool: &str, arguments: Value) -> Result<(String, bool)> {
        let result = self
            .request("tools/call", json!({"name": tool, "arguments": arguments}), CALL_TIMEOUT)
            .await?;
        let is_error = result.get("isError").and_then(Value::as_bool).unwrap_or(false);
        let text = result
            .get("content")
            .and_then(Value::as_array)
            .map(|items| {
                items
                    .iter()
                    .filter_map(|c| c.get("text").and_then(Value::as_str))
                    .collect::<Vec<_>>()
                    .join("\n")
            })
            .unwrap_or_default();
        Ok((text, is_error))
    }
}

fn spawn_reader(stdout: tokio::process::ChildStdout, pending: Pending) {
    tokio::spawn(async move {
        let mut lines = BufReader::new(stdout).lines();
        while let Ok(Some(line)) = lines.next_line().await {
            let Ok(msg) = serde_json::from_str::<Value>(&line) else { continue };
            let Some(id) = msg.get("id").and_then(Value::as_u64) else { continue };
            let reply = if let Some(err) = msg.get("error") {
                Err(err.get("message").and_then(Value::as_str).unwrap_or("error").to_string())
            } else if let Some(res) = msg.get("result") {
                Ok(res.clone())
            } else {
                continue;
            };
            let waiter = pending.lock().expect("pending lock").as_mut().and_then(|m| m.remove(&id));
            if let Some(tx) = waiter {
                let _ = tx.send(reply);
            }
        }
        // EOF: dropping the senders wakes every waiter with a closed-channel error.
        pending.lock().expect("pending lock").take();
    });
}

/// Spawn a server, perform the handshake and list its tools, renamed
/// `mcp__<name>__<tool>`.
pub async fn mcp_connect(name: &str, spec: &McpServerSpec, timeout: Duration) -> Result<(Arc<McpClient>, Vec<ToolSpec>)> {
    let mut child = tokio::process::Command::new(&spec.command)
        .args(&spec.args)
        .envs(&spec.env)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .kill_on_drop(true)
        .spawn()
        .map_err(|e| Error::Mcp(format!("{name}: spawn failed: {e}")))?;
    let stdin = child.stdin.take().ok_or_else(|| Error::Mcp(format!("{name}: no stdin")))?;
    let stdout = child.stdout.take().ok_or_else(|| Error::Mcp(format!("{name}: no stdout")))?;
    let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
    spawn_reader(stdout, pending.clone());
    let client = Arc::new(McpClient {
        name: name.to_string(),
        stdin: tokio::sync::Mutex::new(stdin),
        pending,
        next_id: AtomicU64::new(1),
        _child: Mutex::new(child),
    });

    let handshake = async {
        client
            .request(
                "initialize",
                json!({
                    "protocolVersion": PROTOCOL_VERSION,
                    "capabilities": {},
                    "clientInfo": {"name": "harnesskit", "version": env!("CARGO_PKG_VERSION")}
                }),
                timeout,
            )
            .await?;
        client.notify("notifications/initialized", json!({})).await?;
        client.request("tools/list", json!({}), timeout).await
    };
    let listed = tokio::time::timeout(timeout, handshake)
        .await
        .map_err(|_| Error::Mcp(format!("{name}: handshake timed out")))??;
    let tools = listed
        .get("tools")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Mcp(format!("{name}: malformed tools/list response")))?;
    let mut specs = Vec::new();
    for t in tools {
        let tool = t
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Mcp(format!("{name}: tool without a name")))?;
        let description = t.get("description").and_then(Value::as_str).unwrap_or_default();
        let schema = t.get("inputSchema").cloned().unwrap_or_else(|| json!({"type": "object"}));
        specs.push(ToolSpec::new(format!("mcp__{name}__{tool}"), description, ToolOrigin::Mcp).with_schema(schema));
    }
    Ok((client, specs))
}

/// One remote tool routed through its server's channel.
pub struct McpTool {
    client: Arc<McpClient>,
    spec: ToolSpec,
    remote_name: String,
}

impl McpTool {
    pub fn new(client: Arc<McpClient>, spec: ToolSpec) -> Self {
        let prefix = format!("mcp__{}__", client.name());
        let remote_name = spec.name.strip_prefix(&prefix).unwrap_or(&spec.name).to_string();
        McpTool { client, spec, remote_name }
    }
}

#[async_trait]
impl Tool for McpTool {
    fn spec(&self) -> ToolSpec {
        self.spec.clone()
    }

    async fn invoke(&self, req: &ToolRequest, _ctx: &ToolContext) -> ToolOutcome {
        match self.client.call_tool(&self.remote_name, req.input.clone()).await {
            Ok((text, false)) => ToolOutcome::ok(&req.tool_use_id, text),
            Ok((text, true)) => ToolOutcome::error(&req.tool_use_id, text),
            Err(e) => ToolOutcome::error(&req.tool_use_id, e.to_string()),
        }
    }
}

/// Connect every configured server. Failed servers contribute zero tools and a notification.
pub async fn connect_all(
    servers: &BTreeMap<String, McpServerSpec>,
    timeout: Duration,
) -> (Vec<Arc<dyn Tool>>, Vec<Notification>) {
    let mut tools: Vec<Arc<dyn Tool>> = Vec::new();
    let mut notes = Vec::new();
    for (name, spec) in servers {
        match mcp_connect(name, spec, timeout).await {
            Ok((client, specs)) => {
                for s in specs {
                    tools.push(Arc::new(McpTool::new(client.clone(), s)));
                }
            }
            Err(e) => notes.push(Notification::new("mcp", e.to_string())),
        }
    }
    (tools, notes)
}

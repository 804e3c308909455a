//! Control protocol server: one JSON frame per line over loopback TCP, or
//! one frame per text message after a WebSocket upgrade on the same port.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use futures::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio_tungstenite::tungstenite::Message as WsMessage;
use tokio_util::sync::CancellationToken;

use crate::engine::{AskAnswer, AskResolver, EventBus, LoopEvent, PermissionRequest};
use crate::error::{Error, Result};

/// Unanswered asks are denied after this long.
pub const ASK_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    EventOut,
    CommandIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub direction: Direction,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default)]
    pub id: Value,
    #[serde(default)]
    pub payload: Value,
}

impl Frame {
    pub fn out(kind: &str, id: Value, payload: Value) -> Frame {
        Frame {
            direction: Direction::EventOut,
            kind: kind.into(),
            id,
            payload,
        }
    }

    pub fn command(kind: &str, id: impl Into<Value>, payload: Value) -> Frame {
        Frame {
            direction: Direction::CommandIn,
            kind: kind.into(),
            id: id.into(),
            payload,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }

    /// Sequence number of an outgoing event frame.
    pub fn seq(&self) -> Option<u64> {
        self.id.as_u64()
    }
}

/// Commands a console may send. Anything else gets an error frame.
pub const COMMANDS: &[&str] = &[
    "permission_decision",
    "always_allow",
    "user_prompt",
    "interrupt",
    "replay",
    "sidechain",
];

enum Slot {
    Waiting(oneshot::Sender<AskAnswer>),
    Decided(AskAnswer),
}

#[derive(Default)]
struct State {
    backlog: Vec<Frame>,
    clients: Vec<mpsc::UnboundedSender<String>>,
    next_seq: u64,
    /// Ask ids that have been published, with their answer slot if any.
    asks: HashMap<String, Option<Slot>>,
}

struct Inner {
    state: Mutex<State>,
    prompts_tx: mpsc::UnboundedSender<String>,
    prompts_rx: tokio::sync::Mutex<mpsc::UnboundedReceiver<String>>,
    turn: Mutex<Option<CancellationToken>>,
    sidechain_dir: Mutex<Option<PathBuf>>,
    window: Mutex<u64>,
}

/// Shared by the listener, the event pump and the ask resolver.
#[derive(Clone)]
pub struct ControlServer {
    inner: Arc<Inner>,
    addr: SocketAddr,
}

impl ControlServer {
    /// Bind on loopback. Port 0 picks a free port.
    pub async fn bind(port: u16) -> Result<ControlServer> {
        let listener = TcpListener::bind(("127.0.0.1", port))
            .await
            .map_err(|e| Error::Config(format!("cannot bind control port {port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Error::Other(e.to_string()))?;
        let (prompts_tx, prompts_rx) = mpsc::unbounded_channel();
        let server = ControlServer {
            inner: Arc::new(Inner {
                state: Mutex::new(State::default()),
                prompts_tx,
                prompts_rx: tokio::sync::Mutex::new(prompts_rx),
                turn: Mutex::new(None),
                sidechain_dir: Mutex::new(None),
                window: Mutex::new(0),
            }),
            addr,
        };
        let s = server.clone();
        tokio::spawn(async move {
            while let Ok((stream, peer)) = listener.accept().await {
                if !peer.ip().is_loopback() {
                    continue;
                }
                let s = s.clone();
                tokio::spawn(async move { s.serve_connection(stream).await });
            }
        });
        Ok(server)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Forward a session's events to every console. `sidechain_dir` is where
    /// `<agent_id>.jsonl` files live.
    pub fn attach(&self, bus: &EventBus, sidechain_dir: PathBuf) {
        *self.inner.sidechain_dir.lock().unwrap() = Some(sidechain_dir);
        let mut rx = bus.subscribe();
        let s = self.clone();
        tokio::spawn(async move {
            while let Some(ev) = rx.recv().await {
                s.publish_event(&ev);
            }
        });
    }

    fn publish_event(&self, ev: &LoopEvent) {
        match ev {
            LoopEvent::PermissionRequest(r) => {
                self.inner.state.lock().unwrap().asks.entry(r.id.clone()).or_insert(None);
                self.publish("permission_request", serde_json::to_value(r).expect("serializable"));
            }
            LoopEvent::SubagentUpdate { .. } => {
                self.publish("subagent_update", ev.to_json()["payload"].clone());
            }
            LoopEvent::RequestStart {
                estimate,
                window,
                trace,
                ..
            } => {
                *self.inner.window.lock().unwrap() = *window;
                self.publish("loop_event", ev.to_json());
                self.publish("context_stats", json!({"estimate": estimate, "window": window, "trace": trace}));
            }
            _ => self.publish("loop_event", ev.to_json()),
        }
    }

    /// Append to the backlog and fan out, under one lock.
    fn publish(&self, kind: &str, payload: Value) {
        let mut st = self.inner.state.lock().unwrap();
        st.next_seq += 1;
        let frame = Frame::out(kind, json!(st.next_seq), payload);
        let line = frame.to_line();
        st.backlog.push(frame);
        st.clients.retain(|c| c.send(line.clone()).is_ok());
    }

    /// Every event frame published so far.
    pub fn backlog(&self) -> Vec<Frame> {
        self.inner.state.lock().unwrap().backlog.clone()
    }

    pub fn client_count(&self) -> usize {
        self.inner.state.lock().unwrap().clients.len()
    }

    /// The next prompt submitted by a console.
    pub async fn next_prompt(&self) -> Option<String> {
        self.inner.prompts_rx.lock().await.recv().await
    }

    /// The token an `interrupt` frame cancels.
    pub fn set_turn(&self, token: Option<CancellationToken>) {
        *self.inner.turn.lock().unwrap() = token;
    }

    pub fn resolver(&self, timeout: Duration) -> Arc<dyn AskResolver> {
        Arc::new(ControlResolver {
            server: self.clone(),
            timeout,
        })
    }

    async fn serve_connection(&self, stream: TcpStream) {
        let is_ws = sniff_websocket(&stream).await;
        let (tx, mut rx) = mpsc::unbounded_channel::<String>();
        {
            // Backlog then live frames, with no gap between them.
            let mut st = self.inner.state.lock().unwrap();
            for f in &st.backlog {
                let _ = tx.send(f.to_line());
            }
            st.clients.push(tx.clone());
        }
        if is_ws {
            let Ok(ws) = tokio_tungstenite::accept_async(stream).await else { return };
            let (mut sink, mut source) = ws.split();
            let writer = tokio::spawn(async move {
                while let Some(line) = rx.recv().await {
                    if sink.send(WsMessage::Text(line)).await.is_err() {
                        break;
                    }
                }
            });
            while let Some(Ok(msg)) = source.next().await {
                match msg {
                    WsMessage::Text(t) => self.handle_line(&t, &tx),
                    WsMessage::Close(_) => break,
                    _ => {}
                }
            }
            writer.abort();
        } else {
            let (read, mut write) = stream.into_split();
            let writer = tokio::spawn(async move {
                while let Some(mut line) = rx.recv().await {
                    line.push('\n');
                    if write.write_all(line.as_bytes()).await.is_err() {
                        break;
                    }
                }
            });
            let mut lines = BufReader::new(read).lines();
            while let Ok(Some(line)) = lines.next_line().await {
                if !line.trim().is_empty() {
                    self.handle_line(&line, &tx);
                }
            }
            writer.abort();
        }
    }

    fn reply(&self, to: &mpsc::UnboundedSender<String>, kind: &str, id: Value, payload: Value) {
        let _ = to.send(Frame::out(kind, id, payload).to_line());
    }

    fn handle_line(&self, line: &str, to: &mpsc::UnboundedSender<String>) {
        let frame: Frame = match serde_json::from_str(line) {
            Ok(f) => f,
            Err(e) => return self.reply(to, "error", Value::Null, json!({"message": format!("malformed frame: {e}")})),
        };
        match self.handle(&frame, to) {
            Ok(()) => self.reply(to, "ack", frame.id.clone(), json!({"type": frame.kind})),
            Err(msg) => self.reply(to, "error", frame.id.clone(), json!({"type": frame.kind, "message": msg})),
        }
    }

    fn handle(&self, f: &Frame, to: &mpsc::UnboundedSender<String>) -> std::result::Result<(), String> {
        if f.direction != Direction::CommandIn {
            return Err("only command_in frames are accepted".into());
        }
        let str_field = |k: &str| f.payload.get(k).and_then(Value::as_str);
        match f.kind.as_str() {
            "permission_decision" | "always_allow" => {
                let id = str_field("request_id").ok_or("request_id is required")?;
                let answer = if f.kind == "always_allow" {
                    AskAnswer::AllowAlways
                } else {
                    match str_field("decision").ok_or("decision is required")? {
                        "allow" => AskAnswer::Allow,
                        "deny" => AskAnswer::Deny,
                        "always_allow" => AskAnswer::AllowAlways,
                        other => return Err(format!("unknown decision {other:?}")),
                    }
                };
                self.decide(id, answer)
            }
            "user_prompt" => {
                let text = str_field("text").ok_or("text is required")?;
                self.inner.prompts_tx.send(text.to_string()).map_err(|_| "session closed".to_string())
            }
            "interrupt" => {
                if let Some(t) = self.inner.turn.lock().unwrap().as_ref() {
                    t.cancel();
                }
                Ok(())
            }
            "replay" => {
                let after = f.payload.get("after").and_then(Value::as_u64).unwrap_or(0);
                let st = self.inner.state.lock().unwrap();
                for fr in st.backlog.iter().filter(|fr| fr.seq().is_some_and(|s| s > after)) {
                    let _ = to.send(fr.to_line());
                }
                Ok(())
            }
            "sidechain" => {
                let agent_id = str_field("agent_id").ok_or("agent_id is required")?;
                let payload = self.sidechain(agent_id);
                self.reply(to, "sidechain", f.id.clone(), payload);
                Ok(())
            }
            other => Err(format!("unknown command {other:?}")),
        }
    }

    fn decide(&self, id: &str, answer: AskAnswer) -> std::result::Result<(), String> {
        let mut st = self.inner.state.lock().unwrap();
        let slot = st.asks.get_mut(id).ok_or_else(|| format!("no pending request {id}"))?;
        match slot.take() {
            Some(Slot::Waiting(tx)) => {
                let _ = tx.send(answer);
                Ok(())
            }
            Some(Slot::Decided(prev)) => {
                *slot = Some(Slot::Decided(prev));
                Err(format!("request {id} already answered"))
            }
            None => {
                *slot = Some(Slot::Decided(answer));
                Ok(())
            }
        }
    }

    fn sidechain(&self, agent_id: &str) -> Value {
        let valid = !agent_id.is_empty() && agent_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        let dir = self.inner.sidechain_dir.lock().unwrap().clone();
        let path = dir.filter(|_| valid).map(|d| d.join(format!("{agent_id}.jsonl")));
        match path.and_then(|p| std::fs::read_to_string(p).ok()) {
            Some(text) => {
                let events: Vec<Value> = text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect();
                json!({"agent_id": agent_id, "found": true, "events": events})
            }
            None => json!({"agent_id": agent_id, "found": false, "events": []}),
        }
    }
}

/// WebSocket clients open with an HTTP GET straight away. NDJSON consoles may
/// stay silent, so the sniff gives up after a short wait.
async fn sniff_websocket(stream: &TcpStream) -> bool {
    let mut head = [0u8; 4];
    let sniff = async {
        loop {
            match stream.peek(&mut head).await {
                Ok(n) if n >= 4 || n == 0 => return n >= 4 && &head == b"GET ",
                Ok(_) => tokio::time::sleep(Duration::from_millis(5)).await,
                Err(_) => return false,
            }
        }
    };
    tokio::time::timeout(SNIFF_TIMEOUT, sniff).await.unwrap_or(false)
}

const SNIFF_TIMEOUT: Duration = Duration::from_millis(200);

struct ControlResolver {
    server: ControlServer,
    timeout: Duration,
}

#[async_trait]
impl AskResolver for ControlResolver {
    async fn resolve(&self, req: &PermissionRequest) -> AskAnswer {
        let rx = {
            let mut st = self.server.inner.state.lock().unwrap();
            let slot = st.asks.entry(req.id.clone()).or_insert(None);
            match slot.take() {
                Some(Slot::Decided(a)) => {
                    *slot = Some(Slot::Decided(a));
                    return a;
                }
                _ => {
                    let (tx, rx) = oneshot::channel();
                    *slot = Some(Slot::Waiting(tx));
                    rx
                }
            }
        };
        let answer = match tokio::time::timeout(self.timeout, rx).await {
            Ok(Ok(a)) => a,
            _ => AskAnswer::Deny,
        };
        self.server.inner.state.lock().unwrap().asks.insert(req.id.clone(), Some(Slot::Decided(answer)));
        answer
    }
}

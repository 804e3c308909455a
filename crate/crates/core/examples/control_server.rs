//! An approval console over the loopback control socket (NDJSON frames).

use std::sync::Arc;

use harnesskit::cli::{ControlServer, Frame, ASK_TIMEOUT};
use harnesskit::config::HarnessPaths;
use harnesskit::engine::{run_turn, Harness, Session};
use harnesskit::model::{ScriptStep, ScriptedBackend};
use serde_json::json;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::TcpStream;
use tokio_util::sync::CancellationToken;

#[tokio::main]
async fn main() {
    let root = tempfile::tempdir().unwrap();
    let project = root.path().join("repo");
    std::fs::create_dir_all(&project).unwrap();

    let server = ControlServer::bind(0).await.unwrap();
    let backend = Arc::new(ScriptedBackend::new(vec![
        ScriptStep::tool_use("Bash", json!({"command": "echo deploying"})),
        ScriptStep::text("Deployed."),
    ]));
    let h = Harness::new(backend, HarnessPaths::rooted(root.path()))
        .with_resolver(server.resolver(ASK_TIMEOUT))
        .into_shared();
    let mut s = Session::create(&h, &project).unwrap();
    server.attach(&s.events, s.transcript_path().parent().unwrap().to_path_buf());
    println!("control socket on {}", server.local_addr());

    // The console: print every frame, approve the first permission request.
    let addr = server.local_addr();
    let console = tokio::spawn(async move {
        let (r, mut w) = TcpStream::connect(addr).await.unwrap().into_split();
        let mut lines = BufReader::new(r).lines();
        while let Ok(Some(line)) = lines.next_line().await {
            let f: Frame = serde_json::from_str(&line).unwrap();
            let payload = f.payload.to_string();
            println!("<- {:<18} id={:<5} {}", f.kind, f.id, &payload[..payload.len().min(90)]);
            if f.kind == "permission_request" {
                let cmd = Frame::command("permission_decision", "c1", json!({"request_id": f.payload["id"], "decision": "allow"}));
                println!("-> {}", cmd.to_line());
                w.write_all(format!("{}\n", cmd.to_line()).as_bytes()).await.unwrap();
            }
            if f.kind == "loop_event" && f.payload["kind"] == "done" {
                break;
            }
        }
    });
    while server.client_count() == 0 {
        tokio::task::yield_now().await;
    }

    let cancel = CancellationToken::new();
    server.set_turn(Some(cancel.clone()));
    let out = run_turn(&h, &mut s, "deploy it", cancel).await;
    console.await.unwrap();
    println!("turn finished: {:?} {:?}", out.reason, out.final_text);
}

//! Append-only transcripts: resume, fork, crash truncation and prompt history.

use std::sync::Arc;

use harnesskit::config::HarnessPaths;
use harnesskit::engine::{run_turn, Harness, Session};
use harnesskit::model::{ScriptStep, ScriptedBackend};
use harnesskit::persistence::{append_history, load_transcript, read_history_reverse, HistoryEntry};
use tokio_util::sync::CancellationToken;

#[tokio::main]
async fn main() {
    let root = tempfile::tempdir().unwrap();
    let project = root.path().join("repo");
    std::fs::create_dir_all(&project).unwrap();
    let paths = HarnessPaths::rooted(root.path());

    let backend = Arc::new(ScriptedBackend::new(vec![
        ScriptStep::text("Hello."),
        ScriptStep::text("Still here."),
        ScriptStep::text("Resumed and answering."),
        ScriptStep::text("Answer on the fork."),
    ]));
    let h = Harness::new(backend, paths.clone()).into_shared();
    let mut s = Session::create(&h, &project).unwrap();
    for prompt in ["hi", "are you there?"] {
        run_turn(&h, &mut s, prompt, CancellationToken::new()).await;
        append_history(&paths.history_path(), &HistoryEntry::new(prompt, &project, s.session_id())).unwrap();
    }
    let id = s.session_id().to_string();
    let path = s.transcript_path();
    let first_reply = s.messages()[1].uuid.clone();
    drop(s);

    let bytes = std::fs::read(&path).unwrap();
    println!("transcript {} bytes, {} lines", bytes.len(), bytes.iter().filter(|b| **b == b'\n').count());

    let (mut resumed, _) = Session::resume(&h, &id).unwrap();
    println!("resumed {} with {} messages", resumed.session_id(), resumed.messages().len());
    run_turn(&h, &mut resumed, "still?", CancellationToken::new()).await;
    let grown = std::fs::read(&path).unwrap();
    println!("old file is a byte prefix of the new one: {}", grown.starts_with(&bytes));

    let (mut fork, _) = Session::fork(&h, &id, Some(&first_reply)).unwrap();
    run_turn(&h, &mut fork, "branching off", CancellationToken::new()).await;
    println!("fork {} has {} messages", fork.session_id(), fork.messages().len());

    // A crash mid-write leaves a partial last line; loading keeps the whole lines before it.
    let torn = root.path().join("torn.jsonl");
    std::fs::write(&torn, &grown[..grown.len() - 17]).unwrap();
    let loaded = load_transcript(&torn).unwrap();
    println!("torn copy loads {} of {} messages", loaded.messages.len(), resumed.messages().len());

    let recent: Vec<String> = read_history_reverse(&paths.history_path(), 10).unwrap().into_iter().map(|e| e.display).collect();
    println!("history, newest first: {recent:?}");
}

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use harnesskit::config::HarnessPaths;
use harnesskit::engine::{run_turn, Harness, LoopEvent, Session, TurnOutcome};
use harnesskit::model::{ScriptStep, ScriptedBackend};
use tokio::sync::mpsc::UnboundedReceiver;
use tokio_util::sync::CancellationToken;

pub struct Fixture {
    pub root: tempfile::TempDir,
    pub project: PathBuf,
    pub backend: Arc<ScriptedBackend>,
}

impl Fixture {
    pub fn new(steps: Vec<ScriptStep>) -> Fixture {
        let root = tempfile::tempdir().unwrap();
        let project = root.path().join("repo");
        std::fs::create_dir_all(&project).unwrap();
        Fixture {
            project,
            backend: Arc::new(ScriptedBackend::new(steps)),
            root,
        }
    }

    pub fn paths(&self) -> HarnessPaths {
        HarnessPaths::rooted(self.root.path())
    }

    pub fn harness(&self) -> Harness {
        Harness::new(self.backend.clone(), self.paths())
    }

    pub fn write(&self, rel: &str, text: &str) -> PathBuf {
        let p = self.project.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(&p, text).unwrap();
        p
    }

    pub fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.project.join(rel)).unwrap()
    }
}

pub fn drain(rx: &mut UnboundedReceiver<LoopEvent>) -> Vec<LoopEvent> {
    let mut out = Vec::new();
    while let Ok(ev) = rx.try_recv() {
        out.push(ev);
    }
    out
}

/// Event kinds, with `message` expanded to its role/payload kind.
pub fn kinds(events: &[LoopEvent]) -> Vec<String> {
    events
        .iter()
        .filter(|e| !matches!(e, LoopEvent::StreamDelta { .. }))
        .map(|e| match e {
            LoopEvent::Message(ev) => match ev.to_message() {
                Some(m) => format!("message:{:?}", m.role).to_lowercase(),
                None => format!("{:?}", ev.kind()).to_lowercase(),
            },
            other => other.kind().to_string(),
        })
        .collect()
}

pub async fn turn(h: &Arc<Harness>, s: &mut Session, prompt: &str) -> TurnOutcome {
    run_turn(h, s, prompt, CancellationToken::new()).await
}

pub fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

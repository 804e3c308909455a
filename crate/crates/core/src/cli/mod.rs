//! Entry points: headless one-shot runs, the interactive terminal loop and
//! control-server attachment. All of them drive [`run_turn`].

pub mod control;

use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use clap::{Parser, ValueEnum};
use tokio_util::sync::CancellationToken;

use crate::config::{load_settings, HarnessPaths};
use crate::engine::{
    run_turn, AskAnswer, AskResolver, Harness, LoopEvent, PermissionRequest, Session, StaticResolver, StopReason,
    TurnOutcome,
};
use crate::error::{Error, Result};
use crate::model::{HttpBackend, ModelBackend, ScriptedBackend};
use crate::permissions::{parse_rule, Effect, PermissionMode, PermissionRule, RuleSource};
use crate::persistence::{append_history, read_history_reverse, HistoryEntry};
use crate::types::Notification;

pub use control::{ControlServer, Direction, Frame, ASK_TIMEOUT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_PROMPT_TOO_LONG: i32 = 2;
pub const EXIT_ABORTED: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnAsk {
    Deny,
    Allow,
    /// Abort the run and exit 1.
    Fail,
}

#[derive(Debug, Clone, Parser)]
#[command(name = "harnesskit", version, about = "Agentic coding harness")]
pub struct Cli {
    /// Run one prompt headless and print the final text.
    #[arg(short = 'p', long = "print", value_name = "PROMPT")]
    pub print: Option<String>,
    /// Continue a saved session.
    #[arg(long, value_name = "SESSION_ID", conflicts_with = "fork")]
    pub resume: Option<String>,
    /// Start a new session from a copy of a saved one.
    #[arg(long, value_name = "SESSION_ID")]
    pub fork: Option<String>,
    /// plan, default, acceptEdits, auto, dontAsk or bypassPermissions.
    #[arg(long = "permission-mode", value_name = "MODE")]
    pub permission_mode: Option<PermissionMode>,
    /// Allow rule, e.g. `Bash(prefix:npm test)`. Repeatable.
    #[arg(long = "allowedTools", value_name = "RULE")]
    pub allowed_tools: Vec<String>,
    /// Deny rule. Repeatable.
    #[arg(long = "disallowedTools", value_name = "RULE")]
    pub disallowed_tools: Vec<String>,
    /// Stop after this many tool rounds.
    #[arg(long = "max-turns")]
    pub max_turns: Option<u32>,
    /// Text appended to the system prompt.
    #[arg(long = "append-system-prompt")]
    pub append_system_prompt: Option<String>,
    /// Model id sent to the backend.
    #[arg(long)]
    pub model: Option<String>,
    /// Model to switch to once if the primary is unavailable.
    #[arg(long = "fallback-model")]
    pub fallback_model: Option<String>,
    /// How headless runs answer permission prompts.
    #[arg(long = "on-ask", value_enum, default_value = "deny")]
    pub on_ask: OnAsk,
    /// Serve the control protocol on 127.0.0.1:<PORT>.
    #[arg(long = "control-port")]
    pub control_port: Option<u16>,
    /// Replay model responses from a JSON script instead of calling a backend.
    #[arg(long, value_name = "FILE")]
    pub script: Option<PathBuf>,
    /// Project directory (default: current directory).
    #[arg(long)]
    pub cwd: Option<PathBuf>,
}

impl Cli {
    pub fn parse_from_args<I, T>(args: I) -> std::result::Result<Cli, clap::Error>
    where
        I: IntoIterator<Item = T>,
        T: Into<std::ffi::OsString> + Clone,
    {
        Cli::try_parse_from(args)
    }

    fn project_dir(&self) -> Result<PathBuf> {
        match &self.cwd {
            Some(p) => Ok(p.clone()),
            None => std::env::current_dir().map_err(|e| Error::io(".", e)),
        }
    }

    pub fn cli_rules(&self) -> Result<Vec<PermissionRule>> {
        let allow = self.allowed_tools.iter().map(|r| (r, Effect::Allow));
        let deny = self.disallowed_tools.iter().map(|r| (r, Effect::Deny));
        allow
            .chain(deny)
            .map(|(r, e)| parse_rule(r, e, RuleSource::Cli).map_err(Error::from))
            .collect()
    }
}

pub fn exit_code(out: &TurnOutcome) -> i32 {
    match out.reason {
        StopReason::TextOnly | StopReason::MaxTurns | StopReason::HookStopped => EXIT_OK,
        StopReason::PromptTooLong => EXIT_PROMPT_TOO_LONG,
        StopReason::Aborted => EXIT_ABORTED,
        StopReason::ModelError => EXIT_ERROR,
    }
}

fn backend_for(cli: &Cli) -> Result<Arc<dyn ModelBackend>> {
    if let Some(path) = &cli.script {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b = ScriptedBackend::from_json(&text).map_err(|e| Error::Config(format!("bad script {}: {e}", path.display())))?;
        return Ok(Arc::new(b));
    }
    match HttpBackend::from_env() {
        Some(b) => Ok(Arc::new(b)),
        None => Err(Error::Config("no model backend: set HARNESS_API_URL or pass --script".into())),
    }
}

/// Settings, extensions and flags folded into one harness.
pub async fn build_harness(
    cli: &Cli,
    paths: HarnessPaths,
    backend: Arc<dyn ModelBackend>,
    resolver: Arc<dyn AskResolver>,
) -> Result<(Arc<Harness>, Vec<Notification>)> {
    let project = cli.project_dir()?;
    let settings = load_settings(&paths, &project)?;
    let mut rules = settings.rules.clone();
    rules.extend(cli.cli_rules()?);
    let h = Harness::new(backend, paths).with_settings(&settings)?.with_rules(rules);
    let (mut h, notes) = h.load_extensions(&settings, &project).await;
    h.resolver = resolver;
    let c = &mut h.config;
    if cli.max_turns.is_some() {
        c.max_turns = cli.max_turns;
    }
    if cli.append_system_prompt.is_some() {
        c.append_system_prompt = cli.append_system_prompt.clone();
    }
    if let Some(m) = &cli.model {
        c.model = m.clone();
    }
    if cli.fallback_model.is_some() {
        c.fallback_model = cli.fallback_model.clone();
    }
    if let Some(m) = cli.permission_mode {
        c.default_mode = m;
    }
    Ok((h.into_shared(), notes))
}

/// New, resumed or forked, per the flags.
pub fn open_session(cli: &Cli, h: &Harness) -> Result<(Session, Vec<Notification>)> {
    let (mut s, notes) = match (&cli.resume, &cli.fork) {
        (Some(id), _) => Session::resume(h, id)?,
        (None, Some(id)) => Session::fork(h, id, None)?,
        (None, None) => (Session::create(h, cli.project_dir()?)?, Vec::new()),
    };
    if let Some(m) = cli.permission_mode {
        s.set_mode(m);
    }
    Ok((s, notes))
}

fn record_history(h: &Harness, s: &Session, prompt: &str) {
    let entry = HistoryEntry::new(prompt, s.project_dir(), s.session_id());
    let _ = append_history(&h.paths.history_path(), &entry);
}

/// Answers every ask with Abort and remembers that it did.
struct FailResolver(AtomicBool);

#[async_trait]
impl AskResolver for FailResolver {
    async fn resolve(&self, _req: &PermissionRequest) -> AskAnswer {
        self.0.store(true, Ordering::SeqCst);
        AskAnswer::Abort
    }
}

#[derive(Debug, Clone)]
pub struct HeadlessReport {
    pub exit_code: i32,
    pub outcome: Option<TurnOutcome>,
    pub session_id: Option<String>,
    pub transcript_path: Option<PathBuf>,
    pub notifications: Vec<Notification>,
    /// Set when setup failed before the turn started.
    pub error: Option<String>,
}

impl HeadlessReport {
    fn failed(code: i32, e: Error) -> Self {
        HeadlessReport {
            exit_code: code,
            outcome: None,
            session_id: None,
            transcript_path: None,
            notifications: Vec::new(),
            error: Some(e.to_string()),
        }
    }

    pub fn final_text(&self) -> &str {
        self.outcome.as_ref().map(|o| o.final_text.as_str()).unwrap_or("")
    }

    /// The line written to stderr when the run ends.
    pub fn status_line(&self) -> String {
        match (&self.outcome, &self.error) {
            (Some(o), _) => match &o.error {
                Some(e) => format!("done: {} ({e})", o.reason.as_str()),
                None => format!("done: {}", o.reason.as_str()),
            },
            (None, Some(e)) => format!("error: {e}"),
            (None, None) => "error".into(),
        }
    }
}

/// `-p`: one prompt to done. With `--control-port`, asks go to attached
/// consoles and time out to deny.
pub async fn run_headless(cli: &Cli, paths: HarnessPaths, backend: Option<Arc<dyn ModelBackend>>) -> HeadlessReport {
    let Some(prompt) = cli.print.clone() else {
        return HeadlessReport::failed(EXIT_CONFIG, Error::Config("headless mode needs -p <prompt>".into()));
    };
    let backend = match backend.map(Ok).unwrap_or_else(|| backend_for(cli)) {
        Ok(b) => b,
        Err(e) => return HeadlessReport::failed(EXIT_CONFIG, e),
    };
    let server = match cli.control_port {
        Some(port) => match ControlServer::bind(port).await {
            Ok(s) => Some(s),
            Err(e) => return HeadlessReport::failed(EXIT_CONFIG, e),
        },
        None => None,
    };
    let fail = Arc::new(FailResolver(AtomicBool::new(false)));
    let resolver: Arc<dyn AskResolver> = match (&server, cli.on_ask) {
        (Some(s), _) => s.resolver(ASK_TIMEOUT),
        (None, OnAsk::Deny) => Arc::new(StaticResolver(AskAnswer::Deny)),
        (None, OnAsk::Allow) => Arc::new(StaticResolver(AskAnswer::Allow)),
        (None, OnAsk::Fail) => fail.clone(),
    };
    let (h, mut notes) = match build_harness(cli, paths, backend, resolver).await {
        Ok(x) => x,
        Err(e) => return HeadlessReport::failed(EXIT_CONFIG, e),
    };
    let (mut s, n) = match open_session(cli, &h) {
        Ok(x) => x,
        Err(e) => return HeadlessReport::failed(EXIT_CONFIG, e),
    };
    notes.extend(n);
    let cancel = CancellationToken::new();
    if let Some(server) = &server {
        server.attach(&s.events, transcript_dir(&s));
        server.set_turn(Some(cancel.clone()));
    }
    record_history(&h, &s, &prompt);
    let out = run_turn(&h, &mut s, &prompt, cancel).await;
    s.join_background().await;
    notes.extend(s.close(&h).await);
    let exit_code = if fail.0.load(Ordering::SeqCst) { EXIT_ERROR } else { exit_code(&out) };
    HeadlessReport {
        exit_code,
        session_id: Some(s.session_id().to_string()),
        transcript_path: Some(s.transcript_path()),
        outcome: Some(out),
        notifications: notes,
        error: None,
    }
}

fn transcript_dir(s: &Session) -> PathBuf {
    s.transcript_path().parent().map(Path::to_path_buf).unwrap_or_default()
}

/// `--control-port` without `-p`: prompts arrive as `user_prompt` frames and
/// run one at a time until `stop` is cancelled.
pub async fn serve(h: &Arc<Harness>, s: &mut Session, server: &ControlServer, stop: CancellationToken) -> Vec<TurnOutcome> {
    server.attach(&s.events, transcript_dir(s));
    let mut outcomes = Vec::new();
    loop {
        let prompt = tokio::select! {
            _ = stop.cancelled() => break,
            p = server.next_prompt() => match p { Some(p) => p, None => break },
        };
        let cancel = stop.child_token();
        server.set_turn(Some(cancel.clone()));
        record_history(h, s, &prompt);
        outcomes.push(run_turn(h, s, &prompt, cancel).await);
        server.set_turn(None);
    }
    outcomes
}

/// What the interactive loop needs from a terminal.
pub trait Terminal: Send {
    /// `None` ends the session.
    fn read_line(&mut self, prompt: &str) -> Option<String>;
    /// Approve / deny / always-allow dialog.
    fn ask(&mut self, req: &PermissionRequest) -> AskAnswer;
    fn print(&mut self, text: &str);
}

pub type SharedTerminal = Arc<Mutex<dyn Terminal>>;

/// Routes asks to the terminal dialog.
pub struct TerminalResolver(pub SharedTerminal);

#[async_trait]
impl AskResolver for TerminalResolver {
    async fn resolve(&self, req: &PermissionRequest) -> AskAnswer {
        let term = self.0.clone();
        let req = req.clone();
        tokio::task::spawn_blocking(move || term.lock().unwrap().ask(&req))
            .await
            .unwrap_or(AskAnswer::Deny)
    }
}

/// One line of terminal output per event worth showing.
pub fn render(ev: &LoopEvent) -> Option<String> {
    match ev {
        LoopEvent::StreamDelta { text } => Some(text.clone()),
        LoopEvent::ToolUseSummary {
            tool_name,
            is_error,
            summary,
            ..
        } => Some(format!("\n[{tool_name}{}] {summary}\n", if *is_error { " error" } else { "" })),
        LoopEvent::Notification(n) => Some(format!("\n({}) {}\n", n.source, n.message)),
        LoopEvent::SubagentUpdate { agent_id, status, .. } => Some(format!("\n[agent {agent_id}: {status}]\n")),
        LoopEvent::Done { reason, error } => Some(match error {
            Some(e) => format!("\n-- {} ({e})\n", reason.as_str()),
            None => format!("\n-- {}\n", reason.as_str()),
        }),
        _ => None,
    }
}

/// The read/run loop. `interrupt` is polled during each turn; when it
/// resolves the turn is aborted.
pub async fn interactive_loop<F, Fut>(
    h: &Arc<Harness>,
    s: &mut Session,
    term: SharedTerminal,
    mut interrupt: F,
) -> Vec<TurnOutcome>
where
    F: FnMut() -> Fut,
    Fut: std::future::Future<Output = ()>,
{
    // The terminal lock can be held by an open dialog, so printing happens on
    // a plain thread fed by a forwarding task.
    let mut rx = s.events.subscribe();
    let (tx, lines) = std::sync::mpsc::channel::<String>();
    let forward = tokio::spawn(async move {
        while let Some(ev) = rx.recv().await {
            if let Some(text) = render(&ev) {
                if tx.send(text).is_err() {
                    break;
                }
            }
        }
    });
    let out = term.clone();
    let printer = std::thread::spawn(move || {
        for text in lines {
            out.lock().unwrap().print(&text);
        }
    });
    let mut outcomes = Vec::new();
    loop {
        let t = term.clone();
        let line = tokio::task::spawn_blocking(move || t.lock().unwrap().read_line("> ")).await.ok().flatten();
        let Some(line) = line else { break };
        let prompt = line.trim();
        if prompt.is_empty() {
            continue;
        }
        record_history(h, s, prompt);
        let cancel = CancellationToken::new();
        let turn = run_turn(h, s, prompt, cancel.clone());
        tokio::pin!(turn);
        let outcome = tokio::select! {
            o = &mut turn => o,
            _ = interrupt() => {
                cancel.cancel();
                turn.await
            }
        };
        outcomes.push(outcome);
    }
    s.join_background().await;
    s.close(h).await;
    // Let queued events reach the printer before closing it.
    tokio::task::yield_now().await;
    forward.abort();
    let _ = forward.await;
    let _ = tokio::task::spawn_blocking(move || printer.join()).await;
    outcomes
}

/// rustyline-backed terminal. Up-arrow walks prior prompts from the history file.
pub struct ReadlineTerminal {
    editor: rustyline::DefaultEditor,
}

impl ReadlineTerminal {
    pub fn new(history: &[HistoryEntry]) -> Result<Self> {
        let mut editor = rustyline::DefaultEditor::new().map_err(|e| Error::Config(e.to_string()))?;
        // Newest first on disk order; the editor wants oldest first.
        for e in history.iter().rev() {
            let _ = editor.add_history_entry(e.display.as_str());
        }
        Ok(ReadlineTerminal { editor })
    }

    /// Up-arrow order: the most recent entry comes first.
    pub fn recall_order(&self) -> Vec<String> {
        self.editor.history().iter().rev().cloned().collect()
    }
}

impl Terminal for ReadlineTerminal {
    fn read_line(&mut self, prompt: &str) -> Option<String> {
        use rustyline::error::ReadlineError;
        loop {
            match self.editor.readline(prompt) {
                Ok(line) => {
                    let _ = self.editor.add_history_entry(line.as_str());
                    return Some(line);
                }
                Err(ReadlineError::Interrupted) => continue,
                Err(_) => return None,
            }
        }
    }

    fn ask(&mut self, req: &PermissionRequest) -> AskAnswer {
        let who = req.agent.as_deref().map(|a| format!(" (agent {a})")).unwrap_or_default();
        println!("\nAllow {}{who}? {}\n  input: {}", req.tool_name, req.reason, req.input);
        loop {
            match self.editor.readline("[y]es / [n]o / [a]lways > ").as_deref().map(str::trim) {
                Ok("y") | Ok("yes") => return AskAnswer::Allow,
                Ok("a") | Ok("always") => return AskAnswer::AllowAlways,
                Ok("n") | Ok("no") => return AskAnswer::Deny,
                Ok(_) => continue,
                Err(_) => return AskAnswer::Deny,
            }
        }
    }

    fn print(&mut self, text: &str) {
        use std::io::Write;
        let mut out = std::io::stdout();
        let _ = out.write_all(text.as_bytes());
        let _ = out.flush();
    }
}

/// The interactive session on the process terminal.
pub async fn run_interactive(cli: &Cli, paths: HarnessPaths) -> i32 {
    if !std::io::stdin().is_terminal() {
        eprintln!("no terminal attached; use -p <prompt> for a headless run");
        return EXIT_CONFIG;
    }
    let history = read_history_reverse(&paths.history_path(), 500).unwrap_or_default();
    let term: SharedTerminal = match ReadlineTerminal::new(&history) {
        Ok(t) => Arc::new(Mutex::new(t)),
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    let setup = async {
        let backend = backend_for(cli)?;
        let (h, notes) = build_harness(cli, paths, backend, Arc::new(TerminalResolver(term.clone()))).await?;
        let (s, n) = open_session(cli, &h)?;
        Ok::<_, Error>((h, s, notes.into_iter().chain(n).collect::<Vec<_>>()))
    };
    let (h, mut s, notes) = match setup.await {
        Ok(x) => x,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_CONFIG;
        }
    };
    for n in notes {
        eprintln!("({}) {}", n.source, n.message);
    }
    eprintln!("session {}", s.session_id());
    let outcomes = interactive_loop(&h, &mut s, term, || async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await;
    outcomes.last().map(exit_code).unwrap_or(EXIT_OK)
}

/// Process entry: dispatch on the flags and return the exit code.
pub async fn main_with(cli: Cli, paths: HarnessPaths) -> i32 {
    if cli.print.is_some() {
        let report = run_headless(&cli, paths, None).await;
        if report.outcome.is_some() {
            println!("{}", report.final_text());
        }
        for n in &report.notifications {
            eprintln!("({}) {}", n.source, n.message);
        }
        eprintln!("{}", report.status_line());
        return report.exit_code;
    }
    if let Some(port) = cli.control_port {
        return serve_forever(&cli, paths, port).await;
    }
    run_interactive(&cli, paths).await
}

async fn serve_forever(cli: &Cli, paths: HarnessPaths, port: u16) -> i32 {
    let run = async {
        let server = ControlServer::bind(port).await?;
        let backend = backend_for(cli)?;
        let (h, _) = build_harness(cli, paths, backend, server.resolver(ASK_TIMEOUT)).await?;
        let (mut s, _) = open_session(cli, &h)?;
        eprintln!("control server on {} (session {})", server.local_addr(), s.session_id());
        let stop = CancellationToken::new();
        let st = stop.clone();
        tokio::spawn(async move {
            let _ = tokio::signal::ctrl_c().await;
            st.cancel();
        });
        serve(&h, &mut s, &server, stop).await;
        s.close(&h).await;
        Ok::<_, Error>(())
    };
    match run.await {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            EXIT_CONFIG
        }
    }
}

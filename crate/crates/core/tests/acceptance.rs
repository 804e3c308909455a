//! One PASS/FAIL line per acceptance criterion, each with its time limit.
//! Every check compares the harness against an oracle written here, not
//! against the harness's own helpers.

mod common;

use std::collections::HashSet;
use std::panic::AssertUnwindSafe;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use async_trait::async_trait;
use common::Fixture;
use harnesskit::compaction::{run_shapers, CollapseStore, ShaperContext, ShaperName};
use harnesskit::config::CompactionConfig;
use harnesskit::context::discover_memory_files;
use harnesskit::engine::{run_turn, AskAnswer, EngineConfig, LoopEvent, QueueResolver, Session, StopReason};
use harnesskit::hooks::HookRegistry;
use harnesskit::model::{FixedSummarizer, Injection, ScriptStep, ScriptToolUse};
use harnesskit::permissions::{
    evaluate, parse_rule, prefilter_tools, Effect, PermissionMode, PermissionRule, RuleSource, Verdict,
};
use harnesskit::persistence::load_transcript;
use harnesskit::subagent::{builtin_agents, run_agent, Isolation, ParentLink};
use harnesskit::tools::{
    execute_streaming, Concurrency, Tool, ToolContext, ToolOrigin, ToolOutcome, ToolPool, ToolRequest, ToolSpec,
};
use harnesskit::types::{ContentBlock, Message, Role, TokenUsage};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tokio_util::sync::CancellationToken;

type Check = fn() -> Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, u64, Check); 10] = [
        ("deny precedence (10,000 triples)", 10, deny_precedence),
        ("prefilter/runtime equivalence (1,000 cases)", 5, prefilter_equivalence),
        ("ordered emission (1,000 lists)", 60, ordered_emission),
        ("shaper order and monotonicity", 30, shaper_order),
        ("append-only and crash safety", 30, append_only),
        ("resume fidelity and permission non-restoration (100 sessions)", 20, resume_fidelity),
        ("subagent conservation", 30, subagent_conservation),
        ("recovery limits", 10, recovery_limits),
        ("CLAUDE.md semantics", 10, claude_md),
        ("end-to-end: fix the failing test in auth.test.ts", 5, end_to_end),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        let verdict = match result {
            Ok(Ok(detail)) if secs < limit as f64 => Ok(detail),
            Ok(Ok(detail)) => Err(format!("over time limit; {detail}")),
            Ok(Err(e)) => Err(e),
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        match verdict {
            Ok(detail) => println!("PASS  {name}  [{secs:.2}s < {limit}s]  {detail}"),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name}  [{secs:.2}s, limit {limit}s]  {e}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

// ---------------------------------------------------------------------------
// Permission generators and the matching oracle

const TOOLS: &[&str] = &[
    "Bash", "FileRead", "FileEdit", "FileWrite", "Glob", "Grep", "Agent", "mcp__db__query", "mcp__db__drop", "mcp__fs__read",
];
const WORDS: &[&str] = &["git", "status", "diff", "push", "npm", "test", "install", "rm", "-rf", "ls", "echo", "hi"];
const PATHS: &[&str] = &["src/a.rs", "src/lib/b.rs", "docs/x.md", "README.md", "a.rs", "/etc/passwd", "tests/t.rs"];
const GLOBS: &[&str] = &["src/**", "*.rs", "docs/*", "/etc/**", "src/*.rs", "**/*.md"];
const AGENTS: &[&str] = &["Explore", "Plan", "general-purpose"];
const SOURCES: &[RuleSource] =
    &[RuleSource::Managed, RuleSource::Settings, RuleSource::Session, RuleSource::Cli, RuleSource::Agent];

#[derive(Debug, Clone)]
enum Spec {
    Whole,
    Prefix(Vec<String>),
    Exact(String),
    Glob(&'static str),
    Server(&'static str),
}

#[derive(Debug, Clone)]
struct RuleDesc {
    effect: Effect,
    tool: String,
    spec: Spec,
    source: RuleSource,
}

impl RuleDesc {
    fn text(&self) -> String {
        match &self.spec {
            Spec::Whole => self.tool.clone(),
            Spec::Prefix(p) => format!("{}(prefix:{})", self.tool, p.join(" ")),
            Spec::Exact(v) => format!("{}({v})", self.tool),
            Spec::Glob(g) => format!("{}({g})", self.tool),
            Spec::Server(s) => format!("mcp__{s}"),
        }
    }

    fn parse(&self) -> PermissionRule {
        parse_rule(&self.text(), self.effect, self.source).unwrap()
    }
}

fn segment(rng: &mut StdRng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// The command plus the segments it was built from.
fn command(rng: &mut StdRng) -> (String, Vec<String>) {
    let segs: Vec<String> = (0..rng.gen_range(1..=2)).map(|_| segment(rng)).collect();
    let sep = *[" && ", " ; ", " | "].choose(rng).unwrap();
    (segs.join(sep), segs)
}

fn effect(rng: &mut StdRng) -> Effect {
    *[Effect::Allow, Effect::Deny, Effect::Ask].choose(rng).unwrap()
}

fn random_rule(rng: &mut StdRng) -> RuleDesc {
    let effect = effect(rng);
    let source = *SOURCES.choose(rng).unwrap();
    let (tool, spec) = match rng.gen_range(0..7) {
        0 => (TOOLS.choose(rng).unwrap().to_string(), Spec::Whole),
        1 => {
            let n = rng.gen_range(1..=2);
            let p = (0..n).map(|_| WORDS.choose(rng).unwrap().to_string()).collect();
            ("Bash".into(), Spec::Prefix(p))
        }
        2 => ("Bash".into(), Spec::Exact(segment(rng))),
        3 => {
            let t = ["FileRead", "FileEdit", "FileWrite", "Glob", "Grep"].choose(rng).unwrap();
            (t.to_string(), Spec::Glob(GLOBS.choose(rng).unwrap()))
        }
        4 => ("mcp__db".into(), Spec::Server("db")),
        5 => ("mcp__db__query".into(), Spec::Whole),
        _ => ("Agent".into(), Spec::Exact(AGENTS.choose(rng).unwrap().to_string())),
    };
    RuleDesc { effect, tool, spec, source }
}

struct Req {
    req: ToolRequest,
    segments: Vec<String>,
}

fn random_request(rng: &mut StdRng, tool: &str) -> Req {
    let mut segments = Vec::new();
    let input = match tool {
        "Bash" => {
            let (cmd, segs) = command(rng);
            segments = segs;
            json!({ "command": cmd })
        }
        "FileRead" | "FileEdit" | "FileWrite" | "Glob" | "Grep" => json!({"path": PATHS.choose(rng).unwrap(), "pattern": "x"}),
        "Agent" => json!({"subagent_type": AGENTS.choose(rng).unwrap(), "prompt": "p"}),
        _ => json!({"q": "x"}),
    };
    Req {
        req: ToolRequest::new("t", tool, input),
        segments,
    }
}

fn oracle_glob(pattern: &str, path: &str) -> bool {
    let one_level = |dir: &str, suffix: &str| {
        path.strip_prefix(dir)
            .is_some_and(|rest| !rest.contains('/') && rest.ends_with(suffix))
    };
    match pattern {
        "src/**" => path.starts_with("src/"),
        "/etc/**" => path.starts_with("/etc/"),
        "*.rs" => one_level("", ".rs"),
        "docs/*" => one_level("docs/", ""),
        "src/*.rs" => one_level("src/", ".rs"),
        "**/*.md" => path.ends_with(".md"),
        other => panic!("no oracle for glob {other}"),
    }
}

fn oracle_matches(rule: &RuleDesc, r: &Req) -> bool {
    let req = &r.req;
    match &rule.spec {
        Spec::Server(s) => req.tool_name.starts_with(&format!("mcp__{s}__")),
        _ if rule.tool != req.tool_name => false,
        Spec::Whole => true,
        Spec::Prefix(p) => r.segments.iter().any(|seg| {
            let toks: Vec<&str> = seg.split_whitespace().collect();
            toks.len() >= p.len() && toks.iter().zip(p).all(|(a, b)| a == b)
        }),
        Spec::Exact(v) => match req.tool_name.as_str() {
            "Bash" => {
                req.input["command"].as_str() == Some(v.as_str()) || r.segments.iter().any(|s| s.trim() == v)
            }
            _ => req.input["subagent_type"].as_str() == Some(v.as_str()),
        },
        Spec::Glob(g) => oracle_glob(g, req.input["path"].as_str().unwrap()),
    }
}

fn deny_precedence() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xD0_0D);
    let project = Path::new("/work/project");
    let mut deny_hits = 0;
    for i in 0..10_000 {
        let rules: Vec<RuleDesc> = (0..rng.gen_range(0..=6)).map(|_| random_rule(&mut rng)).collect();
        let parsed: Vec<PermissionRule> = rules.iter().map(RuleDesc::parse).collect();
        let mode = *PermissionMode::ALL.choose(&mut rng).unwrap();
        let tool = *TOOLS.choose(&mut rng).unwrap();
        let r = random_request(&mut rng, tool);
        let denied = rules.iter().any(|d| d.effect == Effect::Deny && oracle_matches(d, &r));
        let got = evaluate(&parsed, mode, &r.req, project);
        if denied {
            deny_hits += 1;
            ensure!(
                matches!(&got, Ok(d) if d.verdict == Verdict::Deny),
                "case {i}: deny matched but got {got:?}\n rules {:?}\n mode {mode}\n req {:?}",
                rules.iter().map(RuleDesc::text).collect::<Vec<_>>(),
                r.req
            );
        } else {
            ensure!(
                !matches!(&got, Ok(d) if d.verdict == Verdict::Deny && d.layer == harnesskit::permissions::Layer::Rule),
                "case {i}: rule-layer deny with no matching deny rule: {got:?} for {:?}",
                r.req
            );
        }
    }
    ensure!(deny_hits >= 300, "only {deny_hits} cases exercised a matching deny");
    Ok(format!("{deny_hits} cases with a matching deny, none allowed"))
}

fn prefilter_equivalence() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xF117);
    let project = Path::new("/work/project");
    let mut removed_total = 0;
    let mut probes = 0;
    for i in 0..1_000 {
        let mut names: Vec<&str> = TOOLS.to_vec();
        names.shuffle(&mut rng);
        names.truncate(rng.gen_range(1..=TOOLS.len()));
        let pool: Vec<ToolSpec> = names
            .iter()
            .map(|n| {
                let origin = if n.starts_with("mcp__") { ToolOrigin::Mcp } else { ToolOrigin::Builtin };
                ToolSpec::new(*n, "", origin)
            })
            .collect();
        let rules: Vec<RuleDesc> = (0..rng.gen_range(0..=6)).map(|_| random_rule(&mut rng)).collect();
        let parsed: Vec<PermissionRule> = rules.iter().map(RuleDesc::parse).collect();
        let kept: HashSet<String> = prefilter_tools(pool, &parsed).into_iter().map(|s| s.name).collect();
        for name in &names {
            let blanket = rules.iter().any(|d| {
                d.effect == Effect::Deny
                    && match &d.spec {
                        Spec::Whole => d.tool == *name,
                        Spec::Server(s) => name.starts_with(&format!("mcp__{s}__")),
                        _ => false,
                    }
            });
            ensure!(blanket != kept.contains(*name), "case {i}: {name} kept={} blanket={blanket}", kept.contains(*name));
            if kept.contains(*name) {
                continue;
            }
            removed_total += 1;
            for mode in PermissionMode::ALL {
                for _ in 0..3 {
                    let r = random_request(&mut rng, name);
                    probes += 1;
                    let got = evaluate(&parsed, mode, &r.req, project);
                    ensure!(
                        !matches!(&got, Ok(d) if d.verdict == Verdict::Allow),
                        "case {i}: prefiltered {name} allowed in {mode}: {got:?}"
                    );
                }
            }
        }
    }
    ensure!(removed_total > 100, "only {removed_total} tools were prefiltered");
    Ok(format!("{removed_total} prefiltered tools, {probes} runtime probes, none allowed"))
}

// ---------------------------------------------------------------------------
// Ordered emission

type Intervals = Arc<Mutex<Vec<(String, Instant, Instant, bool)>>>;

struct Sleepy {
    name: &'static str,
    exclusive: bool,
    log: Intervals,
}

#[async_trait]
impl Tool for Sleepy {
    fn spec(&self) -> ToolSpec {
        let mut s = ToolSpec::new(self.name, "sleeps", ToolOrigin::Builtin).with_schema(json!({"type": "object"}));
        s.concurrency = if self.exclusive { Concurrency::Exclusive } else { Concurrency::ConcurrentSafe };
        s
    }

    async fn invoke(&self, req: &ToolRequest, _ctx: &ToolContext) -> ToolOutcome {
        let start = Instant::now();
        tokio::time::sleep(Duration::from_millis(req.input["ms"].as_u64().unwrap())).await;
        let end = Instant::now();
        self.log.lock().unwrap().push((req.tool_use_id.clone(), start, end, self.exclusive));
        ToolOutcome::ok(&req.tool_use_id, "")
    }
}

async fn one_list(seed: u64) -> Result<usize, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let log: Intervals = Arc::default();
    let pool = ToolPool::new(vec![
        Arc::new(Sleepy { name: "Safe", exclusive: false, log: log.clone() }),
        Arc::new(Sleepy { name: "Excl", exclusive: true, log: log.clone() }),
    ]);
    let n = rng.gen_range(1..=8);
    let reqs: Vec<ToolRequest> = (0..n)
        .map(|i| {
            let name = if rng.gen_bool(0.6) { "Safe" } else { "Excl" };
            ToolRequest::new(format!("c{i}"), name, json!({"ms": rng.gen_range(0..=50)}))
        })
        .collect();
    let ctx = ToolContext::new("/tmp");
    let outs: Vec<ToolOutcome> = futures::StreamExt::collect(execute_streaming(reqs.clone(), &pool, &ctx)).await;
    let got: Vec<&str> = outs.iter().map(|o| o.tool_use_id.as_str()).collect();
    let want: Vec<&str> = reqs.iter().map(|r| r.tool_use_id.as_str()).collect();
    ensure!(got == want, "seed {seed}: order {got:?} != {want:?}");
    let log = log.lock().unwrap();
    let mut overlaps = 0;
    for (i, a) in log.iter().enumerate() {
        for b in &log[i + 1..] {
            let disjoint = a.2 <= b.1 || b.2 <= a.1;
            if a.3 || b.3 {
                ensure!(disjoint, "seed {seed}: exclusive {} overlaps {}", a.0, b.0);
            } else if !disjoint {
                overlaps += 1;
            }
        }
    }
    Ok(overlaps)
}

fn ordered_emission() -> Result<String, String> {
    runtime().block_on(async {
        let mut concurrent_pairs = 0;
        for chunk in (0..1_000u64).collect::<Vec<_>>().chunks(125) {
            let results = futures::future::join_all(chunk.iter().map(|s| one_list(*s))).await;
            for r in results {
                concurrent_pairs += r?;
            }
        }
        ensure!(concurrent_pairs > 0, "no concurrent-safe calls ever overlapped");
        Ok(format!("order held in 1000 lists; {concurrent_pairs} overlapping concurrent-safe pairs observed"))
    })
}

// ---------------------------------------------------------------------------
// Shapers

/// `ceil(chars/4)` of each block's JSON, with the last assistant usage as a base.
fn oracle_estimate(messages: &[Message], snip_freed: u64) -> u64 {
    let chars = |m: &Message| -> u64 {
        let n: usize = m.blocks.iter().map(|b| serde_json::to_string(b).unwrap().chars().count()).sum();
        n.div_ceil(4) as u64
    };
    match messages.iter().rposition(|m| m.role == Role::Assistant && m.usage.is_some()) {
        Some(i) => (messages[i].usage.unwrap().input_tokens + messages[i + 1..].iter().map(chars).sum::<u64>())
            .saturating_sub(snip_freed),
        None => messages.iter().map(chars).sum(),
    }
}

fn filler(rng: &mut StdRng, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| *["alpha ", "beta ", "gamma ", "delta\n"].choose(rng).unwrap()).collect()
}

fn workload(rng: &mut StdRng, target: usize) -> Vec<Message> {
    let mut out: Vec<Message> = Vec::new();
    let mut id = 0;
    while out.len() < target {
        out.push(Message::user_text(format!("please {}", filler(rng, 20))));
        for _ in 0..rng.gen_range(0..4) {
            id += 1;
            let tool = *["Bash", "FileRead", "Grep"].choose(rng).unwrap();
            let mut a = Message::new(
                Role::Assistant,
                vec![ContentBlock::ToolUse { id: format!("tu{id}"), name: tool.into(), input: json!({"q": id}) }],
            );
            if rng.gen_bool(0.5) {
                let so_far = oracle_estimate(&out, 0);
                a.usage = Some(TokenUsage { input_tokens: so_far + rng.gen_range(0..50), output_tokens: 10 });
            }
            out.push(a);
            out.push(Message::new(
                Role::User,
                vec![ContentBlock::tool_result(format!("tu{id}"), filler(rng, 600), false)],
            ));
        }
        out.push(Message::assistant_text(filler(rng, 30)));
    }
    out.truncate(target);
    out
}

fn shaper_order() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0x5_4A9E);
    let summarizer = FixedSummarizer::new("summary of earlier work");
    let hooks = HookRegistry::new();
    let store = CollapseStore::default();
    let caps = |name: &str| if name == "FileRead" { None } else { Some(2_000) };
    let rt = runtime();
    let (mut fired, mut runs) = (0, 0);
    for i in 0..150 {
        let n = rng.gen_range(1..=500);
        let messages = workload(&mut rng, n);
        let cfg = CompactionConfig {
            window_tokens: rng.gen_range(1_000..60_000),
            snip_retention_turns: rng.gen_range(1..25),
            microcompact_age_turns: rng.gen_range(1..8),
            snip_enabled: rng.gen_bool(0.8),
            microcompact_enabled: rng.gen_bool(0.8),
            ..CompactionConfig::default()
        };
        let snip_freed = 0;
        let before = oracle_estimate(&messages, snip_freed);
        let report = rt.block_on(run_shapers(
            messages,
            ShaperContext {
                cfg: &cfg,
                caps: &caps,
                collapse_store: &store,
                summarizer: &summarizer,
                hooks: &hooks,
                hook_payload: json!({}),
                attachments: Vec::new(),
                compact_prompt: "summarize",
                snip_tokens_freed: snip_freed,
                force_compact: false,
                trigger: "auto",
            },
        ));
        runs += 1;
        let names: Vec<ShaperName> = report.trace.iter().map(|t| t.shaper).collect();
        ensure!(names == ShaperName::ORDER, "workload {i}: trace order {names:?}");
        ensure!(report.tokens_before == before, "workload {i}: estimate {} != oracle {before}", report.tokens_before);
        for (j, t) in report.trace.iter().enumerate() {
            ensure!(t.tokens_after <= t.tokens_before, "workload {i}: {:?} raised the estimate", t.shaper);
            if j > 0 {
                ensure!(t.tokens_before == report.trace[j - 1].tokens_after, "workload {i}: gap before {:?}", t.shaper);
            }
        }
        ensure!(report.tokens_after <= before, "workload {i}: estimate grew {before} -> {}", report.tokens_after);
        let post = report.trace[4].tokens_before;
        if !report.auto_compacted {
            let recount = oracle_estimate(&report.view, report.snip_tokens_freed);
            ensure!(recount == post, "workload {i}: post-shaper estimate {post} != recount {recount}");
        }
        let over = post as f64 > 0.92 * cfg.window_tokens as f64;
        ensure!(
            report.auto_compacted == over,
            "workload {i}: auto_compacted={} but estimate {post} vs threshold {}",
            report.auto_compacted,
            0.92 * cfg.window_tokens as f64
        );
        fired += usize::from(over);
    }
    ensure!(fired > 10 && fired < runs, "threshold exercised poorly: {fired}/{runs} fired");
    Ok(format!("{runs} workloads, auto-compact fired in {fired}"))
}

// ---------------------------------------------------------------------------
// Append-only and crash safety

fn allow(rule: &str) -> PermissionRule {
    parse_rule(rule, Effect::Allow, RuleSource::Cli).unwrap()
}

fn tool_use_step(name: &str, input: Value, text: Option<String>) -> ScriptStep {
    ScriptStep {
        text,
        tool_use: Some(ScriptToolUse { name: name.into(), input, id: None }),
        ..Default::default()
    }
}

fn random_turn(rng: &mut StdRng, files: &mut usize) -> Vec<ScriptStep> {
    let mut steps = Vec::new();
    for _ in 0..rng.gen_range(0..4) {
        let step = match rng.gen_range(0..4) {
            0 => tool_use_step("Glob", json!({"pattern": "*.txt"}), None),
            1 => {
                *files += 1;
                tool_use_step("FileWrite", json!({"path": format!("f{}.txt", *files % 3), "content": filler(rng, 40)}), None)
            }
            2 => tool_use_step("FileRead", json!({"path": "seed.txt"}), Some(filler(rng, 10))),
            _ => tool_use_step("Bash", json!({"command": format!("echo {}", rng.gen_range(0..5))}), None),
        };
        steps.push(step);
    }
    steps.push(ScriptStep::text(filler(rng, 40)));
    steps
}

fn scenario_harness(f: &Fixture, rng: &mut StdRng) -> harnesskit::engine::Harness {
    let mut h = f
        .harness()
        .with_rules(vec![allow("Glob"), allow("FileWrite"), allow("FileRead"), allow("Bash(prefix:echo)")])
        .with_summarizer(Arc::new(FixedSummarizer::new("earlier turns summarized")));
    h.compaction.window_tokens = rng.gen_range(300..3_000);
    h.compaction.snip_retention_turns = rng.gen_range(1..4);
    h.compaction.microcompact_age_turns = rng.gen_range(1..3);
    h
}

fn append_only() -> Result<String, String> {
    let rt = runtime();
    let mut rng = StdRng::seed_from_u64(0xA99E);
    let (mut snapshots, mut cuts, mut compactions) = (0, 0, 0);
    for sc in 0..12 {
        let f = Fixture::new(vec![]);
        f.write("seed.txt", "seed contents\n");
        let h = scenario_harness(&f, &mut rng).into_shared();
        let turns: Vec<Vec<ScriptStep>> = {
            let mut files = 0;
            (0..rng.gen_range(3..7)).map(|_| random_turn(&mut rng, &mut files)).collect()
        };
        for t in &turns {
            for s in t {
                f.backend.push(s.clone());
            }
        }
        let mut s = Session::create(&h, &f.project).unwrap();
        let path = s.transcript_path();
        let mut taken: Vec<Vec<u8>> = Vec::new();
        rt.block_on(async {
            let mut rx = s.events.subscribe();
            for (i, _) in turns.iter().enumerate() {
                let fut = run_turn(&h, &mut s, if i % 2 == 0 { "continue" } else { "next step please" }, CancellationToken::new());
                tokio::pin!(fut);
                loop {
                    tokio::select! {
                        _ = &mut fut => break,
                        Some(_) = rx.recv() => taken.push(std::fs::read(&path).unwrap()),
                    }
                }
                while rx.try_recv().is_ok() {
                    taken.push(std::fs::read(&path).unwrap());
                }
            }
        });
        compactions += s.handle.state.compaction.auto_compactions;
        let fin = std::fs::read(&path).unwrap();
        for (k, snap) in taken.iter().enumerate() {
            ensure!(fin.starts_with(snap), "scenario {sc}: snapshot {k} is not a byte prefix");
        }
        snapshots += taken.len();

        let full = load_transcript(&path).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().unwrap();
        for _ in 0..40 {
            let at = rng.gen_range(0..=fin.len());
            let cut = dir.path().join("cut.jsonl");
            std::fs::write(&cut, &fin[..at]).unwrap();
            // Oracle: everything up to and including the last newline before the cut.
            let whole = fin[..at].iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
            let prefix = dir.path().join("prefix.jsonl");
            std::fs::write(&prefix, &fin[..whole]).unwrap();
            let a = load_transcript(&cut).map_err(|e| format!("scenario {sc}: cut at {at} not loadable: {e}"))?;
            let b = load_transcript(&prefix).map_err(|e| format!("scenario {sc}: prefix {whole} not loadable: {e}"))?;
            ensure!(a.events == b.events && a.messages == b.messages, "scenario {sc}: cut at {at} differs from whole-line prefix");
            let lines = fin[..whole].iter().filter(|b| **b == b'\n').count();
            ensure!(a.events.len() == lines, "scenario {sc}: {} events from {lines} whole lines", a.events.len());
            ensure!(full.events.starts_with(&a.events), "scenario {sc}: cut events are not a prefix of the full log");
            cuts += 1;
        }
    }
    ensure!(compactions > 0, "no scenario compacted");
    Ok(format!("{snapshots} snapshots were prefixes; {cuts} random cuts loaded; {compactions} auto-compactions"))
}

// ---------------------------------------------------------------------------
// Resume fidelity

fn resume_fidelity() -> Result<String, String> {
    let rt = runtime();
    let mut rng = StdRng::seed_from_u64(0x2E5);
    let mut grants = 0;
    for n in 0..100 {
        let f = Fixture::new(vec![]);
        f.write("seed.txt", "seed\n");
        let resolver = Arc::new(QueueResolver::new([AskAnswer::AllowAlways], AskAnswer::Deny));
        let mut h = scenario_harness(&f, &mut rng).with_resolver(resolver);
        h.rules.retain(|r| r.tool != "Bash");
        let h = h.into_shared();
        let probe = format!("printf {n}");
        let mut files = 0;
        let mut first = vec![tool_use_step("Bash", json!({"command": probe}), None)];
        first.extend(random_turn(&mut rng, &mut files));
        let mut turns = vec![first];
        for _ in 0..rng.gen_range(0..3) {
            turns.push(random_turn(&mut rng, &mut files));
        }
        for s in turns.iter().flatten() {
            f.backend.push(s.clone());
        }
        let mut s = Session::create(&h, &f.project).unwrap();
        rt.block_on(async {
            for _ in &turns {
                run_turn(&h, &mut s, "work", CancellationToken::new()).await;
            }
        });
        let req = ToolRequest::new("p", "Bash", json!({"command": probe}));
        let before = evaluate(&s.rules(), PermissionMode::Default, &req, &f.project).unwrap();
        ensure!(before.verdict == Verdict::Allow, "session {n}: grant missing before shutdown: {before:?}");
        grants += s.session_rules.len();

        let id = s.session_id().to_string();
        let live = s.messages().to_vec();
        drop(s);
        let (r, _) = Session::resume(&h, &id).map_err(|e| e.to_string())?;
        ensure!(r.messages() == live.as_slice(), "session {n}: resumed messages differ");
        let loaded = load_transcript(&r.transcript_path()).map_err(|e| e.to_string())?;
        ensure!(loaded.messages == live, "session {n}: reloaded transcript differs");
        let after = evaluate(&r.rules(), PermissionMode::Default, &req, &f.project).unwrap();
        ensure!(after.verdict == Verdict::Ask, "session {n}: verdict after resume is {:?}", after.verdict);
    }
    Ok(format!("100 sessions equal after resume; {grants} session grants all reverted to ask"))
}

// ---------------------------------------------------------------------------
// Subagents

fn subagent_conservation() -> Result<String, String> {
    let rt = runtime();
    let mut rng = StdRng::seed_from_u64(0x5AB);
    rt.block_on(async {
        // Conservation: the parent grows by exactly the tool result carrying the summary.
        for n in 0..20 {
            let summary = format!("finding {n}: {}", filler(&mut rng, 30));
            let mut steps = vec![tool_use_step("Agent", json!({"subagent_type": "general-purpose", "prompt": "look"}), None)
                .with_input_tokens(rng.gen_range(50..500))];
            for _ in 0..rng.gen_range(0..4) {
                steps.push(tool_use_step("Glob", json!({"pattern": "*"}), Some(filler(&mut rng, 20))));
            }
            steps.push(ScriptStep::text(summary.clone()));
            let f = Fixture::new(steps);
            let h = f.harness().with_rules(vec![allow("Agent"), allow("Glob")]).into_shared();
            let mut s = Session::create(&h, &f.project).unwrap();
            s.max_turns = Some(1);
            run_turn(&h, &mut s, "delegate", CancellationToken::new()).await;
            let msgs = s.messages();
            ensure!(msgs.len() == 3, "run {n}: parent has {} messages", msgs.len());
            let before = oracle_estimate(&msgs[..2], 0);
            let after = oracle_estimate(msgs, 0);
            let ContentBlock::ToolResult { content, .. } = &msgs[2].blocks[0] else {
                return Err(format!("run {n}: no tool result"));
            };
            ensure!(content == &summary, "run {n}: parent received {content:?}");
            let result_only = oracle_estimate(&msgs[2..], 0);
            ensure!(after - before == result_only, "run {n}: grew {} but result is {result_only}", after - before);
            ensure!(s.estimate() == after, "run {n}: session estimate {} != recount {after}", s.estimate());
        }

        // Sidechain replay.
        for n in 0..10 {
            let mut steps: Vec<ScriptStep> = (0..rng.gen_range(0..5))
                .map(|_| tool_use_step("Glob", json!({"pattern": "*"}), Some(filler(&mut rng, 10))))
                .collect();
            steps.push(ScriptStep::text("child answer"));
            let f = Fixture::new(steps);
            let h = f.harness().with_rules(vec![allow("Glob")]).into_shared();
            let s = Session::create(&h, &f.project).unwrap();
            let def = builtin_agents().into_iter().find(|d| d.name == "general-purpose").unwrap();
            let run = run_agent(&h, &def, "look", &ParentLink::of(&s, &[]), Isolation::InProcess, CancellationToken::new())
                .await
                .map_err(|e| e.to_string())?;
            let loaded = load_transcript(&run.sidechain.transcript_path).map_err(|e| e.to_string())?;
            ensure!(loaded.messages == run.messages, "replay {n}: sidechain differs from the child conversation");
        }

        // Explore never edits: 50 runs x 10 FileEdit attempts, across parent modes.
        let mut attempts = 0;
        let explore = builtin_agents().into_iter().find(|d| d.name == "Explore").unwrap();
        for n in 0..50 {
            let edits: Vec<(&str, Value)> = (0..10)
                .map(|_| ("FileEdit", json!({"path": "a.txt", "old_string": "a", "new_string": "b"})))
                .collect();
            let f = Fixture::new(vec![ScriptStep::tool_uses(edits), ScriptStep::text("done")]);
            f.write("a.txt", "a");
            let h = f
                .harness()
                .with_rules(vec![allow("FileEdit")])
                .with_resolver(Arc::new(harnesskit::engine::StaticResolver(AskAnswer::Allow)))
                .into_shared();
            let mut s = Session::create(&h, &f.project).unwrap();
            s.set_mode(PermissionMode::ALL[n % PermissionMode::ALL.len()]);
            s.session_rules.push(allow("FileEdit(**)"));
            let run = run_agent(&h, &explore, "edit", &ParentLink::of(&s, &[]), Isolation::InProcess, CancellationToken::new())
                .await
                .map_err(|e| e.to_string())?;
            ensure!(f.read("a.txt") == "a", "run {n}: Explore changed a.txt");
            let results: Vec<bool> = run
                .messages
                .iter()
                .flat_map(|m| &m.blocks)
                .filter_map(|b| match b {
                    ContentBlock::ToolResult { is_error, .. } => Some(*is_error),
                    _ => None,
                })
                .collect();
            ensure!(results.len() == 10 && results.iter().all(|e| *e), "run {n}: results {results:?}");
            attempts += results.len();
        }
        Ok(format!("20 conservation runs exact; 10 sidechains replayed; Explore edits 0/{attempts}"))
    })
}

// ---------------------------------------------------------------------------
// Recovery

#[derive(Debug, Clone, Copy, PartialEq)]
enum Fault {
    Cap,
    TooLong,
    Tool,
    Text,
}

/// Expected stop, model calls consumed, escalations.
fn oracle_recovery(faults: &[Fault]) -> (StopReason, usize, u32) {
    let (mut esc, mut reactive) = (0u32, false);
    for (i, f) in faults.iter().enumerate() {
        match f {
            Fault::Cap if esc == 3 => return (StopReason::ModelError, i + 1, esc),
            Fault::Cap => esc += 1,
            Fault::TooLong if reactive => return (StopReason::PromptTooLong, i + 1, esc),
            Fault::TooLong => reactive = true,
            Fault::Tool => {}
            Fault::Text => return (StopReason::TextOnly, i + 1, esc),
        }
    }
    unreachable!("scripts end with text")
}

fn recovery_limits() -> Result<String, String> {
    let rt = runtime();
    let mut rng = StdRng::seed_from_u64(0x4EC);
    let (mut failed_cap, mut failed_ptl) = (0, 0);
    rt.block_on(async {
        for n in 0..150 {
            let mut faults: Vec<Fault> = (0..rng.gen_range(0..9))
                .map(|_| *[Fault::Cap, Fault::Cap, Fault::TooLong, Fault::Tool].choose(&mut rng).unwrap())
                .collect();
            faults.push(Fault::Text);
            let mut steps = vec![ScriptStep::text(filler(&mut rng, 200)).with_input_tokens(400)];
            steps.extend(faults.iter().map(|f| match f {
                Fault::Cap => ScriptStep::inject(Injection::OutputCap),
                Fault::TooLong => ScriptStep::inject(Injection::PromptTooLong),
                Fault::Tool => ScriptStep::tool_use("Glob", json!({"pattern": "*"})),
                Fault::Text => ScriptStep::text("ok"),
            }));
            let f = Fixture::new(steps);
            let h = f
                .harness()
                .with_rules(vec![allow("Glob")])
                .with_summarizer(Arc::new(FixedSummarizer::new("S")))
                .into_shared();
            let mut s = Session::create(&h, &f.project).unwrap();
            run_turn(&h, &mut s, "warm up", CancellationToken::new()).await;
            let calls_before = f.backend.call_count();
            let mut rx = s.events.subscribe();
            let out = run_turn(&h, &mut s, "go", CancellationToken::new()).await;
            let (want, consumed, esc) = oracle_recovery(&faults);
            ensure!(out.reason == want, "script {n} {faults:?}: stop {:?}, oracle {want:?}", out.reason);
            ensure!(f.backend.call_count() - calls_before == consumed, "script {n}: call count");
            let c = s.handle.state.recovery_counters;
            ensure!(c.output_token_escalations <= 3, "script {n}: {} escalations", c.output_token_escalations);
            ensure!(c.output_token_escalations == esc, "script {n}: escalations {} != {esc}", c.output_token_escalations);
            let compactions = s.handle.state.compaction.auto_compactions;
            ensure!(compactions <= 1, "script {n}: {compactions} compactions in one turn");
            let caps: Vec<u32> = f.backend.calls()[calls_before..].iter().map(|c| c.max_output_tokens).collect();
            let base = EngineConfig::default().max_output_tokens;
            ensure!(caps.iter().all(|c| [base, base * 2, base * 4, base * 8].contains(c)), "script {n}: caps {caps:?}");
            let mut events = Vec::new();
            while let Ok(e) = rx.try_recv() {
                events.push(e);
            }
            let tombstones = events.iter().filter(|e| matches!(e, LoopEvent::Tombstone { .. })).count();
            let hits = faults[..consumed].iter().filter(|f| **f == Fault::Cap).count();
            ensure!(tombstones == hits, "script {n}: {tombstones} tombstones for {hits} cap hits");
            failed_cap += usize::from(want == StopReason::ModelError);
            failed_ptl += usize::from(want == StopReason::PromptTooLong);
        }
        ensure!(failed_cap > 0 && failed_ptl > 0, "limits never reached ({failed_cap}, {failed_ptl})");
        Ok(format!("150 fault scripts matched; 4th cap failed in {failed_cap}, 2nd prompt_too_long failed in {failed_ptl}"))
    })
}

// ---------------------------------------------------------------------------
// CLAUDE.md

/// Oracle expansion: own text, then each include (depth-first), each file once.
fn oracle_expand(path: &Path, texts: &std::collections::HashMap<PathBuf, (String, Vec<PathBuf>)>, seen: &mut HashSet<PathBuf>) -> Option<String> {
    if !seen.insert(path.to_path_buf()) {
        return None;
    }
    let (text, incs) = texts.get(path)?;
    let mut out = text.clone();
    for inc in incs {
        if let Some(e) = oracle_expand(inc, texts, seen) {
            if !out.ends_with('\n') {
                out.push('\n');
            }
            out.push('\n');
            out.push_str(&e);
        }
    }
    Some(out)
}

fn claude_md() -> Result<String, String> {
    let mut rng = StdRng::seed_from_u64(0xC1A0);
    let mut total_files = 0;
    for g in 0..60 {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let managed = root.join("managed");
        let home = root.join("home");
        let cwd = root.join("w/a/b");
        let mut level_files: Vec<PathBuf> = vec![
            managed.join("CLAUDE.md"),
            home.join(".claude/CLAUDE.md"),
            root.join("w/CLAUDE.md"),
            root.join("w/a/CLAUDE.md"),
            root.join("w/a/.claude/rules/r1.md"),
            root.join("w/a/CLAUDE.local.md"),
            cwd.join("CLAUDE.md"),
            cwd.join(".claude/CLAUDE.md"),
        ];
        level_files.retain(|_| rng.gen_bool(0.7));
        let n_extra = rng.gen_range(0..=(50 - level_files.len()));
        let mut files = level_files.clone();
        files.extend((0..n_extra).map(|i| root.join(format!("inc/d{}/f{i}.md", i % 4))));
        let immune = root.join("inc/immune.md");
        let mut texts = std::collections::HashMap::new();
        for (i, p) in files.iter().enumerate() {
            let k = rng.gen_range(0..4);
            let incs: Vec<PathBuf> = (0..k).map(|_| files.choose(&mut rng).unwrap().clone()).collect();
            let mut text = format!("marker-{i}\n");
            for inc in &incs {
                text.push_str(&format!("see @{}\n", inc.display()));
            }
            text.push_str(&format!("```\n@{}\n```\nand `@{}` stays inline\n", immune.display(), immune.display()));
            std::fs::create_dir_all(p.parent().unwrap()).unwrap();
            std::fs::write(p, &text).unwrap();
            texts.insert(p.clone(), (text, incs));
        }
        std::fs::create_dir_all(immune.parent().unwrap()).unwrap();
        std::fs::write(&immune, "IMMUNE-CONTENT\n").unwrap();
        std::fs::create_dir_all(&cwd).unwrap();
        total_files += files.len() + 1;

        let (loaded, _) = discover_memory_files(&cwd, &home, &managed);
        let got: Vec<PathBuf> = loaded.iter().map(|m| m.path.clone()).collect();
        ensure!(got == level_files, "graph {g}: order {got:?} != {level_files:?}");
        for m in &loaded {
            let want = oracle_expand(&m.path, &texts, &mut HashSet::new()).unwrap();
            ensure!(m.content == want, "graph {g}: expansion of {} differs", m.path.display());
            ensure!(!m.content.contains("IMMUNE-CONTENT"), "graph {g}: code-block include expanded");
        }
    }
    Ok(format!("60 include graphs ({total_files} files, cycles allowed) matched the oracle"))
}

// ---------------------------------------------------------------------------
// End to end

fn end_to_end() -> Result<String, String> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("test-data");
    let root = tempfile::tempdir().unwrap();
    let project = root.path().join("repo");
    std::fs::create_dir_all(&project).unwrap();
    for name in ["auth.ts", "auth.test.ts", "run-tests.sh"] {
        std::fs::copy(data.join("auth_fix").join(name), project.join(name)).unwrap();
    }
    let script_path = data.join("auth_fix.json");
    let script: Vec<ScriptStep> = serde_json::from_str(&std::fs::read_to_string(&script_path).unwrap()).unwrap();
    let allowed = ["FileRead", "Bash(prefix:sh run-tests.sh)", "FileEdit(auth.ts)"];
    let mut args: Vec<String> = ["harnesskit", "-p", "fix the failing test in auth.test.ts", "--on-ask", "deny", "--script"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    args.push(script_path.to_string_lossy().into_owned());
    args.extend(["--cwd".into(), project.to_string_lossy().into_owned()]);
    for a in allowed {
        args.extend(["--allowedTools".into(), a.into()]);
    }
    let cli = harnesskit::cli::Cli::parse_from_args(&args).map_err(|e| e.to_string())?;
    let paths = harnesskit::config::HarnessPaths::rooted(root.path());
    let report = runtime().block_on(harnesskit::cli::run_headless(&cli, paths, None));
    ensure!(report.exit_code == 0, "exit {} ({})", report.exit_code, report.status_line());

    // Oracle: walk the script; a call is denied iff no allow rule covers it.
    let covered = |name: &str, input: &Value| match name {
        "FileRead" => true,
        "Bash" => input["command"].as_str().unwrap().starts_with("sh run-tests.sh"),
        "FileEdit" => input["path"] == "auth.ts",
        _ => false,
    };
    let mut want: Vec<String> = vec!["session_meta".into(), "message:user:prompt".into()];
    let mut denied = 0;
    for step in &script {
        want.push("message:assistant".into());
        if let Some(tu) = &step.tool_use {
            if tu.name == "FileEdit" && covered(&tu.name, &tu.input) {
                want.push("file_history_snapshot".into());
            }
            let ok = covered(&tu.name, &tu.input);
            denied += usize::from(!ok);
            want.push(format!("message:user:result:{}", if ok { "ran" } else { "denied" }));
        }
    }
    let lines = common::lines(report.transcript_path.as_ref().unwrap());
    let got: Vec<String> = lines
        .iter()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let kind = v["type"].as_str().unwrap().to_string();
            if kind != "message" {
                return kind;
            }
            let role = v["message"]["role"].as_str().unwrap();
            match v["message"]["content"][0]["type"].as_str() {
                Some("tool_result") => {
                    let c = v["message"]["content"][0]["content"].as_str().unwrap();
                    format!("message:{role}:result:{}", if c.starts_with("Permission denied") { "denied" } else { "ran" })
                }
                _ if role == "user" => "message:user:prompt".into(),
                _ => format!("message:{role}"),
            }
        })
        .collect();
    ensure!(got == want, "transcript sequence\n got  {got:?}\n want {want:?}");
    ensure!(denied == 1, "oracle expected {denied} denials");

    // The model saw the denial and the test outputs it acted on.
    let loaded = load_transcript(report.transcript_path.as_ref().unwrap()).map_err(|e| e.to_string())?;
    let results: Vec<(String, bool)> = loaded
        .messages
        .iter()
        .flat_map(|m| &m.blocks)
        .filter_map(|b| match b {
            ContentBlock::ToolResult { content, is_error, .. } => Some((content.clone(), *is_error)),
            _ => None,
        })
        .collect();
    ensure!(results[0].0.contains("checkPassword(\"hunter2\""), "read result: {:?}", results[0]);
    ensure!(results[1].1 && results[1].0.contains("denied"), "ask result: {:?}", results[1]);
    ensure!(results[2].1 && results[2].0.contains("FAIL auth.test.ts"), "first run: {:?}", results[2]);
    ensure!(!results[3].1, "edit failed: {:?}", results[3]);
    ensure!(!results[4].1 && results[4].0.contains("PASS auth.test.ts"), "re-run: {:?}", results[4]);
    let fixed = std::fs::read_to_string(project.join("auth.ts")).unwrap();
    ensure!(fixed.contains("return a === b;"), "auth.ts not fixed");
    ensure!(report.final_text().starts_with("Fixed the failing test"), "final text {:?}", report.final_text());
    ensure!(report.status_line() == "done: text_only", "{}", report.status_line());
    Ok(format!("{} transcript lines in the expected order; 1 ask denied, alternate path passed", lines.len()))
}

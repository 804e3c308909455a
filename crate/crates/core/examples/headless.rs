//! `harnesskit -p` end to end: fix a failing test with a scripted model.

use std::path::Path;

use harnesskit::cli::{run_headless, Cli};
use harnesskit::config::HarnessPaths;

#[tokio::main]
async fn main() {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("test-data");
    let root = tempfile::tempdir().unwrap();
    let project = root.path().join("repo");
    std::fs::create_dir_all(&project).unwrap();
    for name in ["auth.ts", "auth.test.ts", "run-tests.sh"] {
        std::fs::copy(data.join("auth_fix").join(name), project.join(name)).unwrap();
    }

    let script = data.join("auth_fix.json");
    let args = [
        "harnesskit",
        "-p",
        "fix the failing test in auth.test.ts",
        "--script",
        script.to_str().unwrap(),
        "--cwd",
        project.to_str().unwrap(),
        "--allowedTools",
        "FileRead",
        "--allowedTools",
        "Bash(prefix:sh run-tests.sh)",
        "--allowedTools",
        "FileEdit(auth.ts)",
        "--on-ask",
        "deny",
    ];
    let cli = Cli::parse_from_args(args).unwrap();
    let report = run_headless(&cli, HarnessPaths::rooted(root.path()), None).await;

    println!("{}", report.final_text());
    println!("{}", report.status_line());
    println!("exit code {}", report.exit_code);
    for line in std::fs::read_to_string(report.transcript_path.unwrap()).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let first = &v["message"]["content"][0];
        println!("  {:<22} {} {}", v["type"].as_str().unwrap(), v["message"]["role"].as_str().unwrap_or(""), first["type"].as_str().unwrap_or(""));
    }
    println!("auth.ts now: {}", std::fs::read_to_string(project.join("auth.ts")).unwrap().lines().find(|l| l.contains("return")).unwrap().trim());
}

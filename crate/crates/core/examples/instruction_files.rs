//! CLAUDE.md discovery across levels with `@include` expansion.

use harnesskit::context::{discover_memory_files, include_directives};

fn main() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    let write = |rel: &str, text: &str| {
        let p = r.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, text).unwrap();
    };
    write("etc/CLAUDE.md", "Managed: never push to main.\n");
    write("home/.claude/CLAUDE.md", "User: prefer short answers.\n");
    write("work/CLAUDE.md", "Repo: run `make test` before committing.\n@docs/style.md\n");
    write("work/docs/style.md", "Style: four-space indents.\n@../CLAUDE.md\n");
    write(
        "work/svc/.claude/rules/api.md",
        "API: version every endpoint.\n```\n@secrets.md\n```\nQuote `@secrets.md` inline too.\n",
    );
    write("work/svc/CLAUDE.local.md", "Local: my sandbox db is on port 5433.\n");
    write("work/svc/secrets.md", "SHOULD NEVER BE LOADED\n");
    let cwd = r.join("work/svc");

    let (files, notes) = discover_memory_files(&cwd, &r.join("home"), &r.join("etc"));
    for f in &files {
        println!("== {:?} {}", f.level, f.path.strip_prefix(r).unwrap().display());
        println!("{}", f.content.trim_end());
    }
    for n in notes {
        println!("note: {}", n.message);
    }
    println!("\ndirectives in api.md: {:?}", include_directives(&std::fs::read_to_string(cwd.join(".claude/rules/api.md")).unwrap()));
}

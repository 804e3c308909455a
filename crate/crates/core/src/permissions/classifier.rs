use std::sync::OnceLock;

use regex::Regex;
use thiserror::Error;

use super::{primary_content, Decision, Layer, READ_ONLY_TOOLS};
use crate::tools::ToolRequest;
use crate::types::Message;

#[derive(Debug, Clone, Error)]
pub enum ClassifierError {
    #[error("classifier timed out")]
    Timeout,
    #[error("classifier failed: {0}")]
    Failed(String),
}

/// Replaceable judgement used by auto mode.
pub trait Classifier: Send + Sync {
    fn classify(&self, req: &ToolRequest, transcript: &[Message]) -> Result<Decision, ClassifierError>;
}

pub struct DangerousPattern {
    pub name: &'static str,
    pub pattern: &'static str,
}

pub const DANGEROUS_PATTERNS: &[DangerousPattern] = &[
    DangerousPattern { name: "recursive-delete-root", pattern: r"\brm\s+(-[a-zA-Z]*[rf][a-zA-Z]*\s+)+(/|~|\$HOME)(\s|$)" },
    DangerousPattern { name: "pipe-to-shell", pattern: r"\b(curl|wget)\b[^|]*\|\s*(sudo\s+)?(ba|z)?sh\b" },
    DangerousPattern { name: "force-push", pattern: r"\bgit\s+push\b.*(--force\b|\s-f\b)" },
    DangerousPattern { name: "disk-write", pattern: r"\b(mkfs(\.\w+)?|dd\s+.*of=/dev/)" },
    DangerousPattern { name: "fork-bomb", pattern: r":\(\)\s*\{\s*:\|:&\s*\};:" },
    DangerousPattern { name: "chmod-world", pattern: r"\bchmod\s+(-R\s+)?777\s+/" },
    DangerousPattern { name: "privilege", pattern: r"^\s*sudo\b" },
];

fn compiled() -> &'static [(&'static str, Regex)] {
    static CELL: OnceLock<Vec<(&'static str, Regex)>> = OnceLock::new();
    CELL.get_or_init(|| {
        DANGEROUS_PATTERNS
            .iter()
            .map(|p| (p.name, Regex::new(p.pattern).expect("dangerous pattern compiles")))
            .collect()
    })
}

/// Two stages: read-only tools pass, then a pattern table flags destructive commands.
/// Anything neither safe nor dangerous is left to the user.
#[derive(Debug, Default, Clone)]
pub struct HeuristicClassifier;

impl Classifier for HeuristicClassifier {
    fn classify(&self, req: &ToolRequest, _transcript: &[Message]) -> Result<Decision, ClassifierError> {
        if READ_ONLY_TOOLS.contains(&req.tool_name.as_str()) {
            return Ok(Decision::allow(Layer::Classifier, "read-only tool"));
        }
        let content = primary_content(req);
        for (name, re) in compiled() {
            if re.is_match(&content) {
                return Ok(Decision::deny(Layer::Classifier, format!("dangerous pattern: {name}")));
            }
        }
        Ok(Decision::ask(Layer::Classifier, "classifier could not confirm safety"))
    }
}

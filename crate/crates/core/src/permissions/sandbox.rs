use globset::{GlobBuilder, GlobSet, GlobSetBuilder};

use super::RuleParseError;

/// Whether shell commands run inside the OS sandbox.
#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub globally_enabled: bool,
    pub per_invocation_opt_out: bool,
    exclusion_patterns: Vec<String>,
    exclusions: GlobSet,
}

impl SandboxConfig {
    pub fn new(globally_enabled: bool, exclusion_patterns: Vec<String>) -> Result<Self, RuleParseError> {
        let mut builder = GlobSetBuilder::new();
        for p in &exclusion_patterns {
            let glob = GlobBuilder::new(p).literal_separator(false).build().map_err(|e| RuleParseError {
                text: p.clone(),
                position: 0,
                message: format!("invalid exclusion pattern: {e}"),
            })?;
            builder.add(glob);
        }
        let exclusions = builder.build().map_err(|e| RuleParseError {
            text: exclusion_patterns.join(","),
            position: 0,
            message: e.to_string(),
        })?;
        Ok(SandboxConfig {
            globally_enabled,
            per_invocation_opt_out: false,
            exclusion_patterns,
            exclusions,
        })
    }

    pub fn disabled() -> Self {
        Self::new(false, Vec::new()).expect("empty pattern set")
    }

    pub fn exclusion_patterns(&self) -> &[String] {
        &self.exclusion_patterns
    }

    pub fn with_opt_out(mut self, opt_out: bool) -> Self {
        self.per_invocation_opt_out = opt_out;
        self
    }
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

/// Independent of the permission verdict.
pub fn should_use_sandbox(cfg: &SandboxConfig, command: &str) -> bool {
    cfg.globally_enabled && !cfg.per_invocation_opt_out && !cfg.exclusions.is_match(command.trim())
}

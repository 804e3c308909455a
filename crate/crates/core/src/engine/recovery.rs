use serde::{Deserialize, Serialize};

use crate::types::RecoveryCounters;

/// Output-cap escalations allowed in one turn.
pub const MAX_OUTPUT_TOKENS_RECOVERY_LIMIT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TextOnly,
    MaxTurns,
    PromptTooLong,
    HookStopped,
    Aborted,
    /// The backend failed in a way no recovery step covers.
    ModelError,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::TextOnly => "text_only",
            StopReason::MaxTurns => "max_turns",
            StopReason::PromptTooLong => "prompt_too_long",
            StopReason::HookStopped => "hook_stopped",
            StopReason::Aborted => "aborted",
            StopReason::ModelError => "model_error",
        }
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Conditions observed at the end of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StopFlags {
    pub aborted: bool,
    pub hook_stopped: bool,
    /// Recovery is exhausted for a prompt_too_long response.
    pub prompt_too_long: bool,
    pub turns_exhausted: bool,
    /// The last response carried no tool_use block.
    pub text_only: bool,
}

/// `None` means keep looping.
pub fn check_stop(flags: StopFlags) -> Option<StopReason> {
    if flags.aborted {
        Some(StopReason::Aborted)
    } else if flags.hook_stopped {
        Some(StopReason::HookStopped)
    } else if flags.prompt_too_long {
        Some(StopReason::PromptTooLong)
    } else if flags.turns_exhausted {
        Some(StopReason::MaxTurns)
    } else if flags.text_only {
        Some(StopReason::TextOnly)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelFailure {
    OutputCap,
    PromptTooLong,
    /// Retriable transport or availability problem.
    Unavailable(String),
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecoveryConfig {
    pub base_output_tokens: u32,
    pub fallback_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryAction {
    RetryWithLargerOutputCap(u32),
    ReactiveCompactThenRetry,
    SwitchFallbackModel(String),
    Fail(StopReason, String),
}

/// Total policy: what to do about `failure` given what this turn already tried.
pub fn recover(failure: &ModelFailure, counters: &RecoveryCounters, cfg: &RecoveryConfig) -> RecoveryAction {
    match failure {
        ModelFailure::OutputCap => {
            if counters.output_token_escalations < MAX_OUTPUT_TOKENS_RECOVERY_LIMIT {
                let cap = cfg
                    .base_output_tokens
                    .saturating_mul(1 << (counters.output_token_escalations + 1));
                RecoveryAction::RetryWithLargerOutputCap(cap)
            } else {
                RecoveryAction::Fail(
                    StopReason::ModelError,
                    format!("output cap hit {} times in one turn", counters.output_token_escalations + 1),
                )
            }
        }
        ModelFailure::PromptTooLong => {
            if counters.reactive_compact_attempted {
                RecoveryAction::Fail(StopReason::PromptTooLong, "prompt too long after reactive compaction".into())
            } else {
                RecoveryAction::ReactiveCompactThenRetry
            }
        }
        ModelFailure::Unavailable(msg) => match &cfg.fallback_model {
            Some(m) if !counters.fallback_switched => RecoveryAction::SwitchFallbackModel(m.clone()),
            _ => RecoveryAction::Fail(StopReason::ModelError, msg.clone()),
        },
        ModelFailure::Other(msg) => RecoveryAction::Fail(StopReason::ModelError, msg.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(fallback: Option<&str>) -> RecoveryConfig {
        RecoveryConfig {
            base_output_tokens: 1000,
            fallback_model: fallback.map(str::to_string),
        }
    }

    #[test]
    fn precedence_table_exhaustive() {
        for bits in 0u8..32 {
            let f = StopFlags {
                aborted: bits & 1 != 0,
                hook_stopped: bits & 2 != 0,
                prompt_too_long: bits & 4 != 0,
                turns_exhausted: bits & 8 != 0,
                text_only: bits & 16 != 0,
            };
            let order = [
                (f.aborted, StopReason::Aborted),
                (f.hook_stopped, StopReason::HookStopped),
                (f.prompt_too_long, StopReason::PromptTooLong),
                (f.turns_exhausted, StopReason::MaxTurns),
                (f.text_only, StopReason::TextOnly),
            ];
            let expected = order.iter().find(|(set, _)| *set).map(|(_, r)| *r);
            assert_eq!(check_stop(f), expected, "bits {bits:05b}");
        }
    }

    #[test]
    fn output_cap_doubles_then_fails_on_fourth() {
        let mut c = RecoveryCounters::default();
        let mut caps = Vec::new();
        loop {
            match recover(&ModelFailure::OutputCap, &c, &cfg(None)) {
                RecoveryAction::RetryWithLargerOutputCap(n) => {
                    caps.push(n);
                    c.output_token_escalations += 1;
                }
                RecoveryAction::Fail(r, _) => {
                    assert_eq!(r, StopReason::ModelError);
                    break;
                }
                other => panic!("{other:?}"),
            }
        }
        assert_eq!(caps, vec![2000, 4000, 8000]);
    }

    #[test]
    fn prompt_too_long_compacts_once() {
        let mut c = RecoveryCounters::default();
        assert_eq!(recover(&ModelFailure::PromptTooLong, &c, &cfg(None)), RecoveryAction::ReactiveCompactThenRetry);
        c.reactive_compact_attempted = true;
        assert!(matches!(
            recover(&ModelFailure::PromptTooLong, &c, &cfg(None)),
            RecoveryAction::Fail(StopReason::PromptTooLong, _)
        ));
    }

    #[test]
    fn fallback_switches_once() {
        let mut c = RecoveryCounters::default();
        let f = ModelFailure::Unavailable("503".into());
        assert!(matches!(recover(&f, &c, &cfg(None)), RecoveryAction::Fail(StopReason::ModelError, _)));
        assert_eq!(recover(&f, &c, &cfg(Some("small"))), RecoveryAction::SwitchFallbackModel("small".into()));
        c.fallback_switched = true;
        assert!(matches!(recover(&f, &c, &cfg(Some("small"))), RecoveryAction::Fail(..)));
    }
}

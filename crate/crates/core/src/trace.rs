//! Per-iteration records and the serialized reasoning trace.

use serde::{Deserialize, Serialize};

use crate::metrics::CostLedger;
use crate::oracle::VerificationVerdict;
use crate::step::{ReasoningContext, Step};

/// Version of the JSON trace document.
pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Verification of one drafting layer. Linear mode has one candidate per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub candidates: usize,
    /// One verdict per candidate, in candidate order.
    pub verdicts: Vec<VerificationVerdict>,
    /// Indices of candidates whose verdict was accept.
    pub accepted: Vec<usize>,
    /// Candidate chosen to extend the prefix, if any was accepted.
    pub selected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Every drafted step, layer by layer.
    pub drafted: Vec<Step>,
    pub target_steps: Vec<Step>,
    /// Final cascaded verdicts, in the order they were computed.
    pub verdicts: Vec<VerificationVerdict>,
    /// Drafted steps that passed verification (m).
    pub accepted_count: usize,
    pub fallback_used: bool,
    /// Candidates per layer (tree width); 1 in linear mode.
    pub candidate_set_size: usize,
    pub layers: Vec<LayerRecord>,
    /// Steps appended to the context by this iteration.
    pub appended: usize,
    pub budget_truncated: bool,
    /// The target generator had nothing more to emit.
    pub target_exhausted: bool,
    pub ledger: CostLedger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    AnswerMarker,
    EndOfSequence,
    BudgetExhausted,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::AnswerMarker => "answer_marker",
            Termination::EndOfSequence => "end_of_sequence",
            Termination::BudgetExhausted => "budget_exhausted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningTrace {
    pub schema_version: u32,
    pub context: ReasoningContext,
    pub final_answer: Option<String>,
    pub termination: Termination,
    pub iterations: Vec<IterationRecord>,
    pub ledger: CostLedger,
}

impl ReasoningTrace {
    pub fn steps(&self) -> &[Step] {
        &self.context.accepted_steps
    }

    pub fn budget_exhausted(&self) -> bool {
        self.termination == Termination::BudgetExhausted
    }

    /// Every final verdict across iterations.
    pub fn verdicts(&self) -> impl Iterator<Item = &VerificationVerdict> {
        self.iterations.iter().flat_map(|it| it.verdicts.iter())
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Pulls the answer out of a step containing `marker`.
///
/// `"... \boxed{42}"` yields `"42"` (balanced braces); without braces the
/// rest of the line after the marker is returned.
pub fn extract_answer(text: &str, marker: &str) -> Option<String> {
    if marker.is_empty() {
        return None;
    }
    let at = text.rfind(marker)?;
    let rest = &text[at + marker.len()..];
    if let Some(inner) = rest.strip_prefix('{') {
        let mut depth = 1usize;
        for (i, c) in inner.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(inner[..i].trim().to_owned());
                    }
                }
                _ => {}
            }
        }
        return Some(inner.trim().to_owned());
    }
    let line = rest.lines().next().unwrap_or("").trim();
    Some(line.trim_start_matches([':', '=']).trim().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxed_answer() {
        assert_eq!(extract_answer("so \\boxed{42} done", "\\boxed").as_deref(), Some("42"));
        assert_eq!(extract_answer("\\boxed{\\frac{1}{2}}", "\\boxed").as_deref(), Some("\\frac{1}{2}"));
        assert_eq!(extract_answer("Answer: 7", "Answer").as_deref(), Some("7"));
        assert_eq!(extract_answer("nothing here", "\\boxed"), None);
    }
}

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::oracle::{OracleError, VerificationQuery};
use crate::step::estimate_tokens;

pub const TEMPLATE_VERSION: &str = "equivalence-v1";

/// Yes/No prompt used by remote verifiers, and the tokens that count as each
/// answer class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationPromptTemplate {
    pub version: String,
    pub question: String,
    /// Accepted steps shown before the candidates.
    pub context_steps: usize,
    /// Whitespace tokens kept from the end of the prompt.
    pub prompt_tail_tokens: usize,
    pub yes_tokens: Vec<String>,
    pub no_tokens: Vec<String>,
}

impl Default for VerificationPromptTemplate {
    fn default() -> Self {
        let variants = |w: &str| {
            let lower = w.to_lowercase();
            vec![w.to_owned(), format!(" {w}"), lower.clone(), format!(" {lower}")]
        };
        Self {
            version: TEMPLATE_VERSION.into(),
            question: "Are these two steps semantically equivalent as the next reasoning step? Answer Yes or No.".into(),
            context_steps: 2,
            prompt_tail_tokens: 512,
            yes_tokens: variants("Yes"),
            no_tokens: variants("No"),
        }
    }
}

impl VerificationPromptTemplate {
    pub fn render(&self, query: &VerificationQuery<'_>) -> String {
        let prompt = &query.context.prompt;
        let words: Vec<&str> = prompt.split_whitespace().collect();
        let tail = if estimate_tokens(prompt) > self.prompt_tail_tokens {
            words[words.len() - self.prompt_tail_tokens..].join(" ")
        } else {
            prompt.clone()
        };
        let history: Vec<&str> = query
            .context
            .accepted_steps
            .iter()
            .chain(query.prefix)
            .map(|s| s.text.as_str())
            .collect();
        let shown = &history[history.len().saturating_sub(self.context_steps)..];

        let mut out = format!("Problem:\n{tail}\n\n");
        if !shown.is_empty() {
            out.push_str("Previous steps:\n");
            for s in shown {
                out.push_str(s);
                out.push('\n');
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "Candidate A: {}\nCandidate B: {}\n\n{}\nAnswer:",
            query.target_step.text, query.draft_step.text, self.question
        ));
        out
    }

    /// Probability of the Yes class, normalized over the Yes and No mass
    /// found among the returned alternatives.
    pub fn p_accept(&self, top_logprobs: &HashMap<String, f64>) -> Result<f64, OracleError> {
        let mass = |class: &[String]| -> Option<f64> {
            let lps: Vec<f64> = class.iter().filter_map(|t| top_logprobs.get(t).copied()).collect();
            (!lps.is_empty()).then(|| lps.iter().map(|lp| lp.exp()).sum())
        };
        match (mass(&self.yes_tokens), mass(&self.no_tokens)) {
            (None, None) => Err(OracleError::Unverifiable("no Yes/No token among returned alternatives".into())),
            (yes, no) => {
                let (yes, no) = (yes.unwrap_or(0.0), no.unwrap_or(0.0));
                if !(yes + no).is_finite() || yes + no <= 0.0 {
                    return Err(OracleError::Unverifiable("degenerate Yes/No probability mass".into()));
                }
                Ok(yes / (yes + no))
            }
        }
    }
}

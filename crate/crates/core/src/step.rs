//! Reasoning steps, step segmentation, and the evolving reasoning context.
//!
//! A step is a span of text terminated by a boundary delimiter (`"\n\n"` by
//! default). The [`ReasoningContext`] is the prompt plus every accepted step,
//! with a hard token budget that no append may exceed.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which model produced a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOrigin {
    Draft,
    Target,
    Fallback,
}

/// How a step ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEnd {
    /// Closed by the boundary delimiter.
    #[default]
    Delimiter,
    /// Cut off before a delimiter appeared (length limit or end of input).
    Incomplete,
    /// The generator signalled end of sequence after this step.
    EndOfSequence,
}

/// One reasoning unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Step {
    pub text: String,
    pub estimated_tokens: usize,
    pub origin: StepOrigin,
    #[serde(default)]
    pub end: StepEnd,
}

impl Step {
    /// Builds a step whose token count is the whitespace-token estimate.
    pub fn new(text: impl Into<String>, origin: StepOrigin) -> Self {
        let text = text.into();
        let estimated_tokens = estimate_tokens(&text);
        Self { text, estimated_tokens, origin, end: StepEnd::Delimiter }
    }

    /// Builds a step with a token count supplied by a backend tokenizer.
    /// Non-empty text always counts at least one token.
    pub fn with_tokens(text: impl Into<String>, tokens: usize, origin: StepOrigin) -> Self {
        let text = text.into();
        let estimated_tokens = if text.trim().is_empty() { 0 } else { tokens.max(1) };
        Self { text, estimated_tokens, origin, end: StepEnd::Delimiter }
    }

    pub fn with_end(mut self, end: StepEnd) -> Self {
        self.end = end;
        self
    }

    pub fn with_origin(mut self, origin: StepOrigin) -> Self {
        self.origin = origin;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.text.trim().is_empty()
    }

    pub fn is_incomplete(&self) -> bool {
        self.end == StepEnd::Incomplete
    }

    /// Whitespace tokens of the step text.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.text.split_whitespace()
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// Whitespace-token count; the stand-in when no tokenizer is available.
pub fn estimate_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Literal that terminates a step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BoundaryDelimiter(String);

impl BoundaryDelimiter {
    pub fn new(literal: impl Into<String>) -> Result<Self, StepError> {
        let literal = literal.into();
        if literal.is_empty() {
            return Err(StepError::EmptyDelimiter);
        }
        Ok(Self(literal))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for BoundaryDelimiter {
    fn default() -> Self {
        Self("\n\n".to_owned())
    }
}

impl TryFrom<String> for BoundaryDelimiter {
    type Error = StepError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<BoundaryDelimiter> for String {
    fn from(value: BoundaryDelimiter) -> Self {
        value.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StepError {
    #[error("boundary delimiter must be non-empty")]
    EmptyDelimiter,
    #[error("cannot append an empty step")]
    EmptyStep,
    #[error("token budget exceeded: step needs {needed} tokens, {remaining} remain")]
    BudgetExceeded { needed: usize, remaining: usize },
    #[error("prompt uses {prompt_tokens} tokens but the budget is {budget}")]
    PromptExceedsBudget { prompt_tokens: usize, budget: usize },
    #[error("token budget must be positive")]
    ZeroBudget,
}

/// Output of [`split_into_steps`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Segmentation {
    /// Complete steps in order; a trailing fragment without a closing
    /// delimiter is last and marked [`StepEnd::Incomplete`].
    pub steps: Vec<Step>,
    /// Segments dropped because they were blank (consecutive delimiters).
    pub dropped_empty: usize,
}

impl Segmentation {
    pub fn complete_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps.iter().filter(|s| !s.is_incomplete())
    }

    pub fn incomplete(&self) -> Option<&Step> {
        self.steps.last().filter(|s| s.is_incomplete())
    }
}

/// Splits generated text into steps at every occurrence of `delimiter`.
///
/// Step text is kept verbatim; segments that are blank after trimming are
/// dropped and counted.
pub fn split_into_steps(text: &str, delimiter: &BoundaryDelimiter, origin: StepOrigin) -> Segmentation {
    let delim = delimiter.as_str();
    let mut out = Segmentation::default();
    let mut rest = text;
    while let Some(at) = rest.find(delim) {
        let piece = &rest[..at];
        if piece.trim().is_empty() {
            out.dropped_empty += 1;
        } else {
            out.steps.push(Step::new(piece, origin));
        }
        rest = &rest[at + delim.len()..];
    }
    if !rest.trim().is_empty() {
        out.steps.push(Step::new(rest, origin).with_end(StepEnd::Incomplete));
    }
    out
}

/// The prompt plus accepted steps, under a token budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningContext {
    pub prompt: String,
    pub accepted_steps: Vec<Step>,
    pub prompt_tokens: usize,
    pub tokens_used: usize,
    pub token_budget: usize,
}

impl ReasoningContext {
    pub fn new(prompt: impl Into<String>, token_budget: usize) -> Result<Self, StepError> {
        let prompt = prompt.into();
        let prompt_tokens = estimate_tokens(&prompt);
        Self::with_prompt_tokens(prompt, prompt_tokens, token_budget)
    }

    pub fn with_prompt_tokens(
        prompt: impl Into<String>,
        prompt_tokens: usize,
        token_budget: usize,
    ) -> Result<Self, StepError> {
        if token_budget == 0 {
            return Err(StepError::ZeroBudget);
        }
        if prompt_tokens > token_budget {
            return Err(StepError::PromptExceedsBudget { prompt_tokens, budget: token_budget });
        }
        Ok(Self {
            prompt: prompt.into(),
            accepted_steps: Vec::new(),
            prompt_tokens,
            tokens_used: prompt_tokens,
            token_budget,
        })
    }

    pub fn remaining_budget(&self) -> usize {
        self.token_budget - self.tokens_used
    }

    pub fn fits(&self, step: &Step) -> bool {
        step.estimated_tokens <= self.remaining_budget()
    }

    /// Returns a new context with `step` appended, leaving `self` untouched.
    pub fn append_step(&self, step: Step) -> Result<Self, StepError> {
        let mut next = self.clone();
        next.push(step)?;
        Ok(next)
    }

    /// Appends in place. On error the context is unchanged.
    pub fn push(&mut self, step: Step) -> Result<(), StepError> {
        if step.is_empty() {
            return Err(StepError::EmptyStep);
        }
        if !self.fits(&step) {
            return Err(StepError::BudgetExceeded {
                needed: step.estimated_tokens,
                remaining: self.remaining_budget(),
            });
        }
        self.tokens_used += step.estimated_tokens;
        self.accepted_steps.push(step);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.accepted_steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accepted_steps.is_empty()
    }

    pub fn last_step(&self) -> Option<&Step> {
        self.accepted_steps.last()
    }

    /// Tokens spent on steps, prompt excluded.
    pub fn step_tokens(&self) -> usize {
        self.tokens_used - self.prompt_tokens
    }

    /// Prompt followed by every accepted step (and then `extra`), each closed
    /// by the delimiter. This is the text a model continues from.
    pub fn render(&self, delimiter: &BoundaryDelimiter, extra: &[Step]) -> String {
        let d = delimiter.as_str();
        let mut out = String::with_capacity(self.prompt.len() + 64 * (self.len() + extra.len()));
        out.push_str(&self.prompt);
        out.push_str(d);
        for step in self.accepted_steps.iter().chain(extra) {
            out.push_str(&step.text);
            out.push_str(d);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn texts(seg: &Segmentation) -> Vec<&str> {
        seg.steps.iter().map(|s| s.text.as_str()).collect()
    }

    /// Character-level scanner kept separate from `split_into_steps`.
    fn reference_split(text: &str, delim: &str) -> (Vec<String>, Option<String>, usize) {
        let chars: Vec<char> = text.chars().collect();
        let d: Vec<char> = delim.chars().collect();
        let (mut steps, mut dropped) = (Vec::new(), 0);
        let mut cur = String::new();
        let mut i = 0;
        while i < chars.len() {
            if chars[i..].starts_with(&d) {
                if cur.trim().is_empty() {
                    dropped += 1;
                } else {
                    steps.push(cur.clone());
                }
                cur.clear();
                i += d.len();
            } else {
                cur.push(chars[i]);
                i += 1;
            }
        }
        let tail = (!cur.trim().is_empty()).then_some(cur);
        (steps, tail, dropped)
    }

    #[test]
    fn splits_on_default_delimiter() {
        let seg = split_into_steps("a\n\nb\n\nc\n\n", &BoundaryDelimiter::default(), StepOrigin::Target);
        assert_eq!(texts(&seg), ["a", "b", "c"]);
        assert_eq!(seg.dropped_empty, 0);
        assert!(seg.incomplete().is_none());
    }

    #[test]
    fn empty_input_is_empty_list() {
        let seg = split_into_steps("", &BoundaryDelimiter::default(), StepOrigin::Draft);
        assert!(seg.steps.is_empty());
        assert_eq!(seg.dropped_empty, 0);
    }

    #[test]
    fn consecutive_delimiters_drop_blank_step() {
        let input = "x = 1\n\n\n\ny = 2\n\n";
        let seg = split_into_steps(input, &BoundaryDelimiter::default(), StepOrigin::Draft);
        assert_eq!(texts(&seg), ["x = 1", "y = 2"]);
        assert_eq!(seg.dropped_empty, 1);
        let (ref_steps, ref_tail, ref_dropped) = reference_split(input, "\n\n");
        assert_eq!(ref_steps, ["x = 1", "y = 2"]);
        assert_eq!(ref_tail, None);
        assert_eq!(ref_dropped, 1);
    }

    #[test]
    fn trailing_fragment_is_incomplete() {
        let seg = split_into_steps("a\n\nhalf a st", &BoundaryDelimiter::default(), StepOrigin::Draft);
        assert_eq!(texts(&seg), ["a", "half a st"]);
        assert_eq!(seg.incomplete().map(|s| s.text.as_str()), Some("half a st"));
        assert_eq!(seg.complete_steps().count(), 1);
    }

    #[test]
    fn empty_delimiter_rejected() {
        assert_eq!(BoundaryDelimiter::new(""), Err(StepError::EmptyDelimiter));
    }

    #[test]
    fn append_is_additive() {
        let ctx = ReasoningContext::with_prompt_tokens("p", 10, 100).unwrap();
        let next = ctx.append_step(Step::new("a b c", StepOrigin::Draft)).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next.tokens_used, 13);
        assert_eq!(ctx.tokens_used, 10);
    }

    #[test]
    fn append_over_budget_leaves_context_unchanged() {
        let mut ctx = ReasoningContext::with_prompt_tokens("p", 99, 100).unwrap();
        let before = ctx.clone();
        let err = ctx.push(Step::new("two tokens", StepOrigin::Draft)).unwrap_err();
        assert_eq!(err, StepError::BudgetExceeded { needed: 2, remaining: 1 });
        assert_eq!(ctx, before);
    }

    #[test]
    fn five_steps_of_four_tokens() {
        let mut ctx = ReasoningContext::with_prompt_tokens("", 0, 100).unwrap();
        let mut expected = 0usize;
        for i in 0..5 {
            let step = Step::new(format!("w{i} x y z"), StepOrigin::Draft);
            expected += step.text.split(' ').count();
            ctx.push(step).unwrap();
        }
        assert_eq!(ctx.tokens_used, expected);
        assert_eq!(ctx.tokens_used, 20);
        assert_eq!(ctx.len(), 5);
    }

    #[test]
    fn empty_step_rejected() {
        let mut ctx = ReasoningContext::new("p", 10).unwrap();
        assert_eq!(ctx.push(Step::new("  ", StepOrigin::Draft)), Err(StepError::EmptyStep));
    }

    #[test]
    fn prompt_over_budget_rejected() {
        assert!(matches!(
            ReasoningContext::new("a b c", 2),
            Err(StepError::PromptExceedsBudget { prompt_tokens: 3, budget: 2 })
        ));
    }

    #[test]
    fn render_closes_every_step() {
        let mut ctx = ReasoningContext::new("q", 10).unwrap();
        ctx.push(Step::new("a", StepOrigin::Draft)).unwrap();
        let extra = [Step::new("b", StepOrigin::Draft)];
        assert_eq!(ctx.render(&BoundaryDelimiter::default(), &extra), "q\n\na\n\nb\n\n");
    }

    fn step_text() -> impl Strategy<Value = String> {
        "[a-z0-9 =+]{0,6}[a-z0-9=+][a-z0-9 =+]{0,6}"
    }

    proptest! {
        #[test]
        fn round_trip(parts in prop::collection::vec(step_text(), 0..12)) {
            let delim = BoundaryDelimiter::default();
            let input: String = parts.iter().map(|p| format!("{p}\n\n")).collect();
            let seg = split_into_steps(&input, &delim, StepOrigin::Draft);
            let rebuilt: String = seg.steps.iter().map(|s| format!("{}\n\n", s.text)).collect();
            prop_assert_eq!(rebuilt, input);
            prop_assert_eq!(seg.dropped_empty, 0);
        }

        #[test]
        fn matches_reference_scanner(input in "[ab\n ]{0,40}") {
            let seg = split_into_steps(&input, &BoundaryDelimiter::default(), StepOrigin::Draft);
            let (steps, tail, dropped) = reference_split(&input, "\n\n");
            let complete: Vec<String> = seg.complete_steps().map(|s| s.text.clone()).collect();
            prop_assert_eq!(complete, steps);
            prop_assert_eq!(seg.incomplete().map(|s| s.text.clone()), tail);
            prop_assert_eq!(seg.dropped_empty, dropped);
        }

        #[test]
        fn budget_never_exceeded(budget in 1usize..60, sizes in prop::collection::vec(1usize..10, 0..20)) {
            let mut ctx = ReasoningContext::with_prompt_tokens("", 0, budget).unwrap();
            for n in sizes {
                let _ = ctx.push(Step::with_tokens("x", n, StepOrigin::Draft));
                prop_assert!(ctx.tokens_used <= ctx.token_budget);
            }
            let sum: usize = ctx.accepted_steps.iter().map(|s| s.estimated_tokens).sum();
            prop_assert_eq!(sum, ctx.tokens_used);
        }
    }
}

//! Prompt-lookup decoding inside a single step.
//!
//! The most recent `n` tokens are looked up in everything emitted so far; the
//! tokens that followed their last earlier occurrence are proposed as a
//! draft and checked against the target in one forward pass. The output is
//! exactly what greedy target decoding would produce, only in fewer passes.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::oracle::{Generation, Generator, OracleError};
use crate::step::{ReasoningContext, Step, StepEnd, StepOrigin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldConfig {
    pub n: usize,
    pub max_draft: usize,
}

impl Default for PldConfig {
    fn default() -> Self {
        Self { n: 2, max_draft: 8 }
    }
}

/// Token history with an index from each n-gram to its latest occurrence
/// that has at least one token after it.
#[derive(Debug, Clone)]
pub struct NgramIndex<T> {
    cache: Vec<T>,
    n: usize,
    max_draft: usize,
    latest: HashMap<Vec<T>, usize>,
}

impl<T: Clone + Eq + Hash> NgramIndex<T> {
    /// # Panics
    /// If `n` is zero.
    pub fn new(n: usize, max_draft: usize) -> Self {
        assert!(n > 0, "n-gram length must be positive");
        Self { cache: Vec::new(), n, max_draft, latest: HashMap::new() }
    }

    pub fn from_tokens(tokens: impl IntoIterator<Item = T>, n: usize, max_draft: usize) -> Self {
        let mut index = Self::new(n, max_draft);
        index.extend(tokens);
        index
    }

    pub fn push(&mut self, token: T) {
        self.cache.push(token);
        let len = self.cache.len();
        if len > self.n {
            let start = len - 1 - self.n;
            self.latest.insert(self.cache[start..start + self.n].to_vec(), start);
        }
    }

    pub fn extend(&mut self, tokens: impl IntoIterator<Item = T>) {
        for t in tokens {
            self.push(t);
        }
    }

    pub fn tokens(&self) -> &[T] {
        &self.cache
    }

    pub fn len(&self) -> usize {
        self.cache.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cache.is_empty()
    }

    /// Up to `max_draft` tokens that followed the most recent earlier
    /// occurrence of `suffix`. Empty when there is none.
    pub fn propose(&self, suffix: &[T]) -> &[T] {
        if suffix.len() != self.n {
            return &[];
        }
        match self.latest.get(suffix) {
            Some(&start) => {
                let from = start + self.n;
                &self.cache[from..(from + self.max_draft).min(self.cache.len())]
            }
            None => &[],
        }
    }

    /// Proposal for the cache's own trailing n-gram.
    pub fn propose_next(&self) -> &[T] {
        if self.cache.len() < self.n {
            return &[];
        }
        self.propose(&self.cache[self.cache.len() - self.n..])
    }
}

/// Length of the longest prefix of `proposal` the target agrees with.
/// `target(i)` is the target's token at offset `i`, `None` past the end.
pub fn verify_tokens<T: PartialEq>(proposal: &[T], mut target: impl FnMut(usize) -> Option<T>) -> usize {
    proposal
        .iter()
        .enumerate()
        .take_while(|(i, tok)| target(*i).as_ref() == Some(*tok))
        .count()
}

/// Greedy token-level access to a target model.
pub trait TokenStream: Send + Sync {
    /// The token that follows `context ⊕ prefix ⊕ emitted` within the current
    /// step, or `None` once the step is complete.
    fn next_token(
        &self,
        context: &ReasoningContext,
        prefix: &[Step],
        emitted: &[String],
    ) -> Result<Option<String>, OracleError>;

    /// How a completed step ends.
    fn step_end(&self, _context: &ReasoningContext, _prefix: &[Step], _tokens: &[String]) -> StepEnd {
        StepEnd::Delimiter
    }
}

/// Target generator that decodes each step with prompt lookup.
///
/// Every forward pass checks the proposal and contributes one extra token
/// from the target (the correction after a mismatch or the continuation
/// after a full match), so each pass emits at least one token.
#[derive(Debug, Clone)]
pub struct PromptLookupGenerator<S> {
    stream: S,
    config: PldConfig,
}

impl<S: TokenStream> PromptLookupGenerator<S> {
    pub fn new(stream: S, config: PldConfig) -> Self {
        Self { stream, config }
    }

    pub fn stream(&self) -> &S {
        &self.stream
    }
}

fn history_tokens<'a>(context: &'a ReasoningContext, prefix: &'a [Step]) -> impl Iterator<Item = String> + 'a {
    std::iter::once(context.prompt.as_str())
        .chain(context.accepted_steps.iter().chain(prefix).map(|s| s.text.as_str()))
        .flat_map(str::split_whitespace)
        .map(str::to_owned)
}

impl<S: TokenStream> Generator for PromptLookupGenerator<S> {
    fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError> {
        let mut index = NgramIndex::from_tokens(history_tokens(context, prefix), self.config.n.max(1), self.config.max_draft);
        let mut emitted: Vec<String> = Vec::new();
        let mut passes = 0usize;
        // The step boundary arrives with the token that completes the step,
        // so detecting it costs no extra pass.
        while let Some(first) = self.stream.next_token(context, prefix, &emitted)? {
            passes += 1;
            let proposal = index.propose_next().to_vec();
            let mut next = Some(first);
            for tok in proposal {
                if next.as_ref() != Some(&tok) {
                    break;
                }
                emitted.push(tok.clone());
                index.push(tok);
                next = self.stream.next_token(context, prefix, &emitted)?;
            }
            match next {
                Some(tok) => {
                    emitted.push(tok.clone());
                    index.push(tok);
                }
                None => break,
            }
        }
        if emitted.is_empty() {
            return Err(OracleError::Exhausted);
        }
        let end = self.stream.step_end(context, prefix, &emitted);
        let step = Step::new(emitted.join(" "), StepOrigin::Target).with_end(end);
        Ok(Generation { step, forward_passes: passes })
    }
}

//! The step-level speculation engine with confidence-gated verification.
//!
//! Each iteration runs three stages:
//!
//! 1. The draft model proposes `k` steps autoregressively.
//! 2. For every drafted step `ŝ_j` the target generates its own rival step
//!    `s_j` from `context ⊕ ŝ_1 … ŝ_{j-1}`; these generations are independent
//!    and may run concurrently. The pairs are then verified in order with
//!    [`cascaded_verify`] until the first rejection.
//! 3. Accepted drafts are appended. If nothing was accepted the target
//!    produces the next step itself.
//!
//! Tree mode drafts `W` candidates per layer, verifies all of them against
//! the layer's target step and extends the prefix with the accepted
//! candidate of highest confidence.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::config::{ConfigError, Gate, RejectPolicy, RunConfig};
use crate::metrics::CostLedger;
use crate::oracle::{Generation, Generator, OracleError, Tier, VerificationQuery, VerificationVerdict, Verifier};
use crate::step::{ReasoningContext, Step, StepEnd, StepError, StepOrigin};
use crate::trace::{extract_answer, IterationRecord, LayerRecord, ReasoningTrace, Termination, TRACE_SCHEMA_VERSION};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CascadeError {
    #[error("{} verifier failed: {source}", tier.as_str())]
    Escalation { tier: Tier, source: OracleError },
    #[error("{} generator failed: {source}", tier.as_str())]
    Generation { tier: Tier, source: OracleError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Context(#[from] StepError),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// A model used in one role: something that writes steps and something
/// that judges them.
#[derive(Clone, Copy)]
pub struct ModelRole<'a> {
    pub generator: &'a dyn Generator,
    pub verifier: &'a dyn Verifier,
}

impl<'a> ModelRole<'a> {
    pub fn new(generator: &'a dyn Generator, verifier: &'a dyn Verifier) -> Self {
        Self { generator, verifier }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeOutcome {
    /// The verdict that decides the step.
    pub verdict: VerificationVerdict,
    /// What the draft tier said, when it answered.
    pub draft_verdict: Option<VerificationVerdict>,
    pub escalated: bool,
    pub draft_failed: bool,
}

/// Two-tier decision: keep the draft verdict when its confidence clears the
/// gate, otherwise ask the target verifier.
///
/// A failing draft verifier escalates; a failing target verifier is an error.
pub fn cascaded_verify(
    query: &VerificationQuery<'_>,
    gate: Gate,
    draft: &dyn Verifier,
    target: &dyn Verifier,
) -> Result<CascadeOutcome, CascadeError> {
    gate.validate()?;
    let (draft_verdict, draft_failed) = match draft.verify(query) {
        Ok(v) => (Some(VerificationVerdict { tier: Tier::Draft, ..v }), false),
        Err(e) => {
            warn!(error = %e, "draft verifier failed, escalating");
            (None, true)
        }
    };
    if let Some(v) = draft_verdict {
        if gate.keeps_draft(v.confidence) {
            return Ok(CascadeOutcome { verdict: v, draft_verdict, escalated: false, draft_failed });
        }
    }
    let v = target
        .verify(query)
        .map_err(|source| CascadeError::Escalation { tier: Tier::Target, source })?;
    Ok(CascadeOutcome {
        verdict: VerificationVerdict { tier: Tier::Target, ..v },
        draft_verdict,
        escalated: true,
        draft_failed,
    })
}

/// Index of the highest-confidence confidence value; ties go to the lowest index.
pub fn argmax_confidence<I: IntoIterator<Item = f64>>(confidences: I) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in confidences.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the accepted candidate with the highest verification confidence.
pub fn select_best_candidate(candidates: &[(Step, VerificationVerdict)]) -> Result<&Step, CascadeError> {
    if candidates.is_empty() {
        return Err(CascadeError::Contract("no candidates to select from".into()));
    }
    if candidates.iter().any(|(_, v)| !v.is_accept()) {
        return Err(CascadeError::Contract("every candidate must carry an accept verdict".into()));
    }
    let i = argmax_confidence(candidates.iter().map(|(_, v)| v.confidence)).expect("non-empty");
    Ok(&candidates[i].0)
}

fn gen_err(tier: Tier) -> impl Fn(OracleError) -> CascadeError {
    move |source| CascadeError::Generation { tier, source }
}

struct Committed {
    context: ReasoningContext,
    appended: usize,
    truncated: bool,
    target_exhausted: bool,
}

pub struct CascadeEngine<'a> {
    config: RunConfig,
    draft: ModelRole<'a>,
    target: ModelRole<'a>,
    tree_mode: bool,
}

impl<'a> CascadeEngine<'a> {
    /// Tree mode is used whenever `tree_width > 1`.
    pub fn new(config: RunConfig, draft: ModelRole<'a>, target: ModelRole<'a>) -> Result<Self, CascadeError> {
        config.validate()?;
        let tree_mode = config.tree_width > 1;
        Ok(Self { config, draft, target, tree_mode })
    }

    /// Runs the tree path even at width 1.
    pub fn force_tree_mode(mut self) -> Self {
        self.tree_mode = true;
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    fn is_terminal(&self, step: &Step) -> bool {
        step.end == StepEnd::EndOfSequence
            || (!self.config.answer_marker.is_empty() && step.text.contains(&self.config.answer_marker))
    }

    fn truncate_at_terminal(&self, steps: &[Step]) -> usize {
        steps.iter().position(|s| self.is_terminal(s)).map_or(steps.len(), |t| t + 1)
    }

    /// Target rivals for every step of `spine`, the j-th conditioned on
    /// `base ⊕ spine[..j]`. Stops at the first exhausted generation.
    fn generate_targets(
        &self,
        context: &ReasoningContext,
        base: &[Step],
        spine: &[Step],
    ) -> Result<Vec<Generation>, CascadeError> {
        let prefixes: Vec<Vec<Step>> = (0..spine.len())
            .map(|j| base.iter().chain(&spine[..j]).cloned().collect())
            .collect();
        let results: Vec<Result<Generation, OracleError>> = if self.config.concurrent_targets && spine.len() > 1 {
            let generator = self.target.generator;
            std::thread::scope(|scope| {
                let handles: Vec<_> = prefixes
                    .iter()
                    .map(|prefix| scope.spawn(move || generator.generate(context, prefix)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(OracleError::Protocol("target worker panicked".into()))))
                    .collect()
            })
        } else {
            prefixes.iter().map(|p| self.target.generator.generate(context, p)).collect()
        };
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(g) => out.push(Generation { step: g.step.with_origin(StepOrigin::Target), ..g }),
                Err(OracleError::Exhausted) => break,
                Err(e) => return Err(gen_err(Tier::Target)(e)),
            }
        }
        Ok(out)
    }

    fn charge_targets(ledger: &mut CostLedger, targets: &[Generation]) {
        ledger.target_gen_steps += targets.len() as u64;
        ledger.target_gen_tokens += targets.iter().map(|g| g.step.estimated_tokens as u64).sum::<u64>();
        ledger.target_gen_passes += targets.iter().map(|g| g.forward_passes as u64).sum::<u64>();
        ledger.target_critical_passes += targets.iter().map(|g| g.forward_passes as u64).max().unwrap_or(0);
    }

    fn charge_draft(ledger: &mut CostLedger, step: &Step) {
        ledger.draft_gen_steps += 1;
        ledger.draft_gen_tokens += step.estimated_tokens as u64;
    }

    fn verify_pair(
        &self,
        ledger: &mut CostLedger,
        query: &VerificationQuery<'_>,
    ) -> Result<VerificationVerdict, CascadeError> {
        let out = cascaded_verify(query, self.config.gamma, self.draft.verifier, self.target.verifier)?;
        ledger.draft_verify_calls += 1;
        ledger.target_verify_calls += out.escalated as u64;
        ledger.draft_verify_failures += out.draft_failed as u64;
        Ok(out.verdict)
    }

    /// Appends accepted drafts, or fall back to the target.
    fn commit(
        &self,
        context: &ReasoningContext,
        accepted: &[Step],
        rejected_rival: Option<&Step>,
        ledger: &mut CostLedger,
    ) -> Result<Committed, CascadeError> {
        let mut next = context.clone();
        let mut appended = 0;
        let mut truncated = false;
        if !accepted.is_empty() {
            for (i, step) in accepted.iter().enumerate() {
                if next.push(step.clone()).is_err() {
                    truncated = true;
                    ledger.candidates_discarded += (accepted.len() - i) as u64;
                    break;
                }
                ledger.steps_accepted += 1;
                ledger.trace_tokens += step.estimated_tokens as u64;
                appended += 1;
            }
            if let (false, RejectPolicy::AdoptTargetStep, Some(rival)) =
                (truncated, self.config.reject_policy, rejected_rival)
            {
                let rival = rival.clone().with_origin(StepOrigin::Target);
                let tokens = rival.estimated_tokens as u64;
                if next.push(rival).is_ok() {
                    ledger.adopted_target_steps += 1;
                    ledger.trace_tokens += tokens;
                    appended += 1;
                } else {
                    truncated = true;
                }
            }
            return Ok(Committed { context: next, appended, truncated, target_exhausted: false });
        }

        let fallback = match (self.config.reject_policy, rejected_rival) {
            (RejectPolicy::AdoptTargetStep, Some(rival)) => rival.clone(),
            _ => match self.target.generator.generate(context, &[]) {
                Ok(g) => {
                    ledger.fallback_gen_tokens += g.step.estimated_tokens as u64;
                    ledger.fallback_gen_passes += g.forward_passes as u64;
                    g.step
                }
                Err(OracleError::Exhausted) => {
                    return Ok(Committed { context: next, appended, truncated, target_exhausted: true });
                }
                Err(e) => return Err(gen_err(Tier::Target)(e)),
            },
        };
        let fallback = fallback.with_origin(StepOrigin::Fallback);
        let tokens = fallback.estimated_tokens as u64;
        if next.push(fallback).is_ok() {
            ledger.fallbacks += 1;
            ledger.trace_tokens += tokens;
            appended += 1;
        } else {
            truncated = true;
        }
        Ok(Committed { context: next, appended, truncated, target_exhausted: false })
    }

    pub fn run_iteration(&self, context: &ReasoningContext) -> Result<(ReasoningContext, IterationRecord), CascadeError> {
        if self.tree_mode {
            self.run_tree_iteration(context)
        } else {
            self.run_linear_iteration(context)
        }
    }

    /// One pass of draft, verify, commit with a single drafted chain.
    pub fn run_linear_iteration(
        &self,
        context: &ReasoningContext,
    ) -> Result<(ReasoningContext, IterationRecord), CascadeError> {
        let mut ledger = CostLedger::default();

        // Draft k steps.
        let drafted: Vec<Step> = self
            .draft
            .generator
            .generate_steps(context, self.config.draft_steps)
            .map_err(gen_err(Tier::Draft))?
            .into_iter()
            .map(|g| g.step.with_origin(StepOrigin::Draft))
            .collect();
        for s in &drafted {
            Self::charge_draft(&mut ledger, s);
        }
        let drafts = &drafted[..self.truncate_at_terminal(&drafted)];

        // Rival target steps, then verification.
        let targets = self.generate_targets(context, &[], drafts)?;
        Self::charge_targets(&mut ledger, &targets);
        let target_steps: Vec<Step> = targets.into_iter().map(|g| g.step).collect();

        let mut verdicts = Vec::new();
        let mut layers = Vec::new();
        let mut m = 0;
        let mut rejected_at = None;
        for j in 0..target_steps.len() {
            let query = VerificationQuery::new(context, &drafts[..j], &drafts[j], &target_steps[j])
                .map_err(|e| CascadeError::Contract(e.to_string()))?;
            let verdict = self.verify_pair(&mut ledger, &query)?;
            verdicts.push(verdict);
            let accept = verdict.is_accept();
            layers.push(LayerRecord {
                candidates: 1,
                verdicts: vec![verdict],
                accepted: if accept { vec![0] } else { vec![] },
                selected: accept.then_some(0),
            });
            if !accept {
                ledger.steps_rejected += 1;
                rejected_at = Some(j);
                break;
            }
            m += 1;
        }

        // Commit.
        let committed = if !drafts.is_empty() && target_steps.is_empty() {
            Committed { context: context.clone(), appended: 0, truncated: false, target_exhausted: true }
        } else {
            let rival = rejected_at.map(|j| &target_steps[j]);
            self.commit(context, &drafts[..m], rival, &mut ledger)?
        };
        debug!(m, drafted = drafted.len(), appended = committed.appended, "linear iteration");
        let record = IterationRecord {
            drafted,
            target_steps,
            verdicts,
            accepted_count: m,
            fallback_used: m == 0,
            candidate_set_size: 1,
            layers,
            appended: committed.appended,
            budget_truncated: committed.truncated,
            target_exhausted: committed.target_exhausted,
            ledger,
        };
        Ok((committed.context, record))
    }

    /// Tree-structured iteration with `tree_width` candidates per layer.
    ///
    /// Layers are drafted along a spine made of each layer's first
    /// candidate, and one target step is generated per layer from the
    /// selected prefix. When a layer selects a candidate off the spine, the
    /// remaining layers are re-drafted from the new prefix.
    pub fn run_tree_iteration(
        &self,
        context: &ReasoningContext,
    ) -> Result<(ReasoningContext, IterationRecord), CascadeError> {
        let depth = self.config.draft_steps;
        let width = self.config.tree_width;
        let mut ledger = CostLedger::default();
        let mut drafted = Vec::new();
        let mut target_steps = Vec::new();
        let mut verdicts = Vec::new();
        let mut layers = Vec::new();
        let mut selected: Vec<Step> = Vec::new();
        let mut rival: Option<Step> = None;
        let mut target_exhausted = false;

        'segments: while selected.len() < depth {
            let mut spine: Vec<Step> = Vec::new();
            let mut candidates: Vec<Vec<Step>> = Vec::new();
            for _ in 0..depth - selected.len() {
                let prefix: Vec<Step> = selected.iter().chain(&spine).cloned().collect();
                let mut layer = Vec::with_capacity(width);
                for i in 0..width {
                    match self.draft.generator.generate_candidate(context, &prefix, i) {
                        Ok(g) => layer.push(g.step.with_origin(StepOrigin::Draft)),
                        Err(OracleError::Exhausted) => break,
                        Err(e) => return Err(gen_err(Tier::Draft)(e)),
                    }
                }
                if layer.is_empty() {
                    break;
                }
                for s in &layer {
                    Self::charge_draft(&mut ledger, s);
                }
                drafted.extend(layer.iter().cloned());
                let eos = layer[0].end == StepEnd::EndOfSequence;
                spine.push(layer[0].clone());
                candidates.push(layer);
                if eos {
                    break;
                }
            }
            let usable = self.truncate_at_terminal(&spine);
            spine.truncate(usable);
            candidates.truncate(usable);
            if spine.is_empty() {
                break;
            }

            let targets = self.generate_targets(context, &selected, &spine)?;
            Self::charge_targets(&mut ledger, &targets);
            let segment_targets: Vec<Step> = targets.into_iter().map(|g| g.step).collect();
            target_steps.extend(segment_targets.iter().cloned());
            if segment_targets.is_empty() {
                target_exhausted = selected.is_empty();
                break;
            }

            for (layer_idx, target_step) in segment_targets.iter().enumerate() {
                let layer = &candidates[layer_idx];
                let mut layer_verdicts = Vec::with_capacity(layer.len());
                for cand in layer {
                    let query = VerificationQuery::new(context, &selected, cand, target_step)
                        .map_err(|e| CascadeError::Contract(e.to_string()))?;
                    let v = self.verify_pair(&mut ledger, &query)?;
                    layer_verdicts.push(v);
                    verdicts.push(v);
                }
                let accepted: Vec<usize> = (0..layer.len()).filter(|&i| layer_verdicts[i].is_accept()).collect();
                ledger.steps_rejected += (layer.len() - accepted.len()) as u64;
                if accepted.is_empty() {
                    layers.push(LayerRecord { candidates: layer.len(), verdicts: layer_verdicts, accepted, selected: None });
                    rival = Some(target_step.clone());
                    break 'segments;
                }
                let pool: Vec<(Step, VerificationVerdict)> =
                    accepted.iter().map(|&i| (layer[i].clone(), layer_verdicts[i])).collect();
                let best = select_best_candidate(&pool)?;
                let pick = accepted[pool.iter().position(|(s, _)| std::ptr::eq(s, best)).expect("from pool")];
                ledger.candidates_discarded += (accepted.len() - 1) as u64;
                let chosen = layer[pick].clone();
                let terminal = self.is_terminal(&chosen);
                selected.push(chosen);
                layers.push(LayerRecord {
                    candidates: layer.len(),
                    verdicts: layer_verdicts,
                    accepted,
                    selected: Some(pick),
                });
                if terminal || selected.len() == depth {
                    break 'segments;
                }
                if pick != 0 {
                    continue 'segments;
                }
            }
            // Every layer of the segment went through on the spine, so the
            // spine ran short (end of sequence or exhausted target).
            break;
        }

        let m = selected.len();
        let committed = if target_exhausted {
            Committed { context: context.clone(), appended: 0, truncated: false, target_exhausted: true }
        } else {
            self.commit(context, &selected, rival.as_ref(), &mut ledger)?
        };
        debug!(m, drafted = drafted.len(), appended = committed.appended, "tree iteration");
        let record = IterationRecord {
            drafted,
            target_steps,
            verdicts,
            accepted_count: m,
            fallback_used: m == 0,
            candidate_set_size: width,
            layers,
            appended: committed.appended,
            budget_truncated: committed.truncated,
            target_exhausted: committed.target_exhausted,
            ledger,
        };
        Ok((committed.context, record))
    }

    pub fn run_trace(&self, prompt: &str) -> Result<ReasoningTrace, CascadeError> {
        if prompt.trim().is_empty() {
            return Err(CascadeError::Contract("prompt must be non-empty".into()));
        }
        let context = ReasoningContext::new(prompt, self.config.token_budget)?;
        self.run_trace_from(context)
    }

    /// Iterates until an answer marker, end of sequence, or budget exhaustion.
    pub fn run_trace_from(&self, mut context: ReasoningContext) -> Result<ReasoningTrace, CascadeError> {
        let mut iterations = Vec::new();
        let mut ledger = CostLedger::default();
        let termination = loop {
            if context.remaining_budget() == 0 {
                break Termination::BudgetExhausted;
            }
            let (next, record) = self.run_iteration(&context)?;
            ledger += record.ledger;
            let appended = record.appended;
            let exhausted = record.target_exhausted;
            let truncated = record.budget_truncated;
            iterations.push(record);
            context = next;
            if exhausted {
                break Termination::EndOfSequence;
            }
            let fresh = &context.accepted_steps[context.len() - appended..];
            if let Some(last) = fresh.last() {
                if !self.config.answer_marker.is_empty() && last.text.contains(&self.config.answer_marker) {
                    break Termination::AnswerMarker;
                }
                if last.end == StepEnd::EndOfSequence {
                    break Termination::EndOfSequence;
                }
            }
            if truncated || appended == 0 {
                break Termination::BudgetExhausted;
            }
        };
        Ok(finish(context, termination, iterations, ledger, &self.config.answer_marker))
    }
}

fn finish(
    context: ReasoningContext,
    termination: Termination,
    iterations: Vec<IterationRecord>,
    ledger: CostLedger,
    marker: &str,
) -> ReasoningTrace {
    let final_answer = context
        .accepted_steps
        .iter()
        .rev()
        .find_map(|s| extract_answer(&s.text, marker));
    ReasoningTrace { schema_version: TRACE_SCHEMA_VERSION, context, final_answer, termination, iterations, ledger }
}

/// Plain target decoding: the reference that speculation is measured against.
///
/// Every step is charged as a target generation on the critical path.
pub fn run_target_only(
    prompt: &str,
    config: &RunConfig,
    target: &dyn Generator,
) -> Result<ReasoningTrace, CascadeError> {
    config.validate()?;
    let mut context = ReasoningContext::new(prompt, config.token_budget)?;
    let mut ledger = CostLedger::default();
    let marker = config.answer_marker.as_str();
    let termination = loop {
        let g = match target.generate(&context, &[]) {
            Ok(g) => g,
            Err(OracleError::Exhausted) => break Termination::EndOfSequence,
            Err(e) => return Err(gen_err(Tier::Target)(e)),
        };
        let step = g.step.with_origin(StepOrigin::Target);
        let (tokens, end) = (step.estimated_tokens as u64, step.end);
        let marked = !marker.is_empty() && step.text.contains(marker);
        if context.push(step).is_err() {
            break Termination::BudgetExhausted;
        }
        ledger.target_gen_steps += 1;
        ledger.target_gen_tokens += tokens;
        ledger.target_gen_passes += g.forward_passes as u64;
        ledger.target_critical_passes += g.forward_passes as u64;
        ledger.trace_tokens += tokens;
        if marked {
            break Termination::AnswerMarker;
        }
        if end == StepEnd::EndOfSequence {
            break Termination::EndOfSequence;
        }
    };
    Ok(finish(context, termination, Vec::new(), ledger, marker))
}

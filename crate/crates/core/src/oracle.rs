//! Generator and verifier contracts implemented by every model backend.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::step::{ReasoningContext, Step, StepEnd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

impl Decision {
    pub fn from_accept(accept: bool) -> Self {
        if accept {
            Decision::Accept
        } else {
            Decision::Reject
        }
    }

    pub fn is_accept(self) -> bool {
        self == Decision::Accept
    }

    pub fn flipped(self) -> Self {
        match self {
            Decision::Accept => Decision::Reject,
            Decision::Reject => Decision::Accept,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Draft,
    Target,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Draft => "draft",
            Tier::Target => "target",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationVerdict {
    pub decision: Decision,
    /// Probability the verifier assigned to `decision`.
    pub confidence: f64,
    pub tier: Tier,
}

impl VerificationVerdict {
    pub fn new(decision: Decision, confidence: f64, tier: Tier) -> Result<Self, OracleError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(OracleError::ProbabilityOutOfRange(confidence));
        }
        Ok(Self { decision, confidence, tier })
    }

    pub fn is_accept(&self) -> bool {
        self.decision.is_accept()
    }
}

/// Builds a binary verdict from the accept-class probability.
///
/// The decision is the majority class and the confidence is its probability,
/// so confidence never drops below 0.5. Exactly 0.5 resolves to accept.
pub fn verdict_from_decision_probability(p_accept: f64, tier: Tier) -> Result<VerificationVerdict, OracleError> {
    if !(0.0..=1.0).contains(&p_accept) {
        return Err(OracleError::ProbabilityOutOfRange(p_accept));
    }
    let accept = p_accept >= 0.5;
    let confidence = if accept { p_accept } else { 1.0 - p_accept };
    Ok(VerificationVerdict { decision: Decision::from_accept(accept), confidence, tier })
}

/// Arguments of one step-equivalence check.
///
/// `prefix` holds the drafted steps preceding the pair; both steps are rival
/// versions of the step that follows `context ⊕ prefix`.
#[derive(Debug, Clone, Copy)]
pub struct VerificationQuery<'a> {
    pub context: &'a ReasoningContext,
    pub prefix: &'a [Step],
    pub draft_step: &'a Step,
    pub target_step: &'a Step,
}

impl<'a> VerificationQuery<'a> {
    pub fn new(
        context: &'a ReasoningContext,
        prefix: &'a [Step],
        draft_step: &'a Step,
        target_step: &'a Step,
    ) -> Result<Self, OracleError> {
        if draft_step.is_empty() || target_step.is_empty() {
            return Err(OracleError::Invalid("verification steps must be non-empty".into()));
        }
        Ok(Self { context, prefix, draft_step, target_step })
    }

    /// Index of the step under verification within the trace.
    pub fn position(&self) -> usize {
        self.context.len() + self.prefix.len()
    }
}

/// A generated step with the number of model forward passes it took.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub step: Step,
    pub forward_passes: usize,
}

impl Generation {
    /// One forward pass per token.
    pub fn autoregressive(step: Step) -> Self {
        let forward_passes = step.estimated_tokens;
        Self { step, forward_passes }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("generator reached end of sequence with nothing to emit")]
    Exhausted,
    #[error("verdict unavailable: {0}")]
    Unverifiable(String),
    #[error("backend failure after {attempts} attempt(s): {message}")]
    Backend { message: String, attempts: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("probability {0} outside [0, 1]")]
    ProbabilityOutOfRange(f64),
}

/// Produces the next reasoning step.
pub trait Generator: Send + Sync {
    /// Next step after `context ⊕ prefix`.
    fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError>;

    /// The `index`-th independent sample for the next step. Index 0 must
    /// equal [`Generator::generate`].
    fn generate_candidate(
        &self,
        context: &ReasoningContext,
        prefix: &[Step],
        index: usize,
    ) -> Result<Generation, OracleError> {
        let _ = index;
        self.generate(context, prefix)
    }

    /// Up to `k` steps, each conditioned on the ones before it. Stops early
    /// after an end-of-sequence step or when the generator is exhausted.
    fn generate_steps(&self, context: &ReasoningContext, k: usize) -> Result<Vec<Generation>, OracleError> {
        let mut out: Vec<Generation> = Vec::with_capacity(k);
        let mut prefix: Vec<Step> = Vec::with_capacity(k);
        while out.len() < k {
            let g = match self.generate(context, &prefix) {
                Ok(g) => g,
                Err(OracleError::Exhausted) => break,
                Err(e) => return Err(e),
            };
            let eos = g.step.end == StepEnd::EndOfSequence;
            prefix.push(g.step.clone());
            out.push(g);
            if eos {
                break;
            }
        }
        Ok(out)
    }
}

/// Judges whether a drafted step is equivalent to the target's rival step.
pub trait Verifier: Send + Sync {
    fn verify(&self, query: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError>;
}

impl<G: Generator + ?Sized> Generator for &G {
    fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError> {
        (**self).generate(context, prefix)
    }

    fn generate_candidate(
        &self,
        context: &ReasoningContext,
        prefix: &[Step],
        index: usize,
    ) -> Result<Generation, OracleError> {
        (**self).generate_candidate(context, prefix, index)
    }

    fn generate_steps(&self, context: &ReasoningContext, k: usize) -> Result<Vec<Generation>, OracleError> {
        (**self).generate_steps(context, k)
    }
}

impl<V: Verifier + ?Sized> Verifier for &V {
    fn verify(&self, query: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError> {
        (**self).verify(query)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::step::StepOrigin;
    use proptest::prelude::*;

    #[test]
    fn majority_side() {
        let v = verdict_from_decision_probability(0.93, Tier::Draft).unwrap();
        assert_eq!((v.decision, v.confidence), (Decision::Accept, 0.93));
    }

    #[test]
    fn complement_side() {
        let v = verdict_from_decision_probability(0.10, Tier::Target).unwrap();
        assert_eq!(v.decision, Decision::Reject);
        assert!((v.confidence - 0.90).abs() < 1e-12);
        assert_eq!(v.tier, Tier::Target);
    }

    #[test]
    fn tie_accepts() {
        let v = verdict_from_decision_probability(0.5, Tier::Draft).unwrap();
        assert_eq!((v.decision, v.confidence), (Decision::Accept, 0.5));
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(verdict_from_decision_probability(1.01, Tier::Draft).is_err());
        assert!(verdict_from_decision_probability(-0.1, Tier::Draft).is_err());
        assert!(verdict_from_decision_probability(f64::NAN, Tier::Draft).is_err());
    }

    struct Counter;

    impl Generator for Counter {
        fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError> {
            let n = context.len() + prefix.len();
            if n == 4 {
                return Err(OracleError::Exhausted);
            }
            let end = if n == 2 { StepEnd::EndOfSequence } else { StepEnd::Delimiter };
            Ok(Generation::autoregressive(Step::new(format!("s{n}"), StepOrigin::Draft).with_end(end)))
        }
    }

    #[test]
    fn generate_steps_is_autoregressive_and_stops_at_eos() {
        let ctx = ReasoningContext::new("p", 100).unwrap();
        let steps = Counter.generate_steps(&ctx, 5).unwrap();
        let texts: Vec<_> = steps.iter().map(|g| g.step.text.as_str()).collect();
        assert_eq!(texts, ["s0", "s1", "s2"]);
        let one = Counter.generate_steps(&ctx, 1).unwrap();
        assert_eq!(one[0], Counter.generate(&ctx, &[]).unwrap());
    }

    #[test]
    fn generate_steps_stops_when_exhausted() {
        let mut ctx = ReasoningContext::new("p", 100).unwrap();
        ctx.push(Step::new("a", StepOrigin::Target)).unwrap();
        ctx.push(Step::new("b", StepOrigin::Target)).unwrap();
        ctx.push(Step::new("c", StepOrigin::Target)).unwrap();
        let steps = Counter.generate_steps(&ctx, 5).unwrap();
        assert_eq!(steps.len(), 1);
    }

    proptest! {
        #[test]
        fn confidence_at_least_half(p in 0.0f64..=1.0) {
            let v = verdict_from_decision_probability(p, Tier::Draft).unwrap();
            prop_assert!(v.confidence >= 0.5);
        }

        #[test]
        fn complement_symmetry(p in 0.0f64..=1.0) {
            prop_assume!(p != 0.5);
            let a = verdict_from_decision_probability(p, Tier::Draft).unwrap();
            let b = verdict_from_decision_probability(1.0 - p, Tier::Draft).unwrap();
            prop_assert_eq!(a.decision, b.decision.flipped());
            prop_assert!((a.confidence - b.confidence).abs() < 1e-12);
        }
    }
}

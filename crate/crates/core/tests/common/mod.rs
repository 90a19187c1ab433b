#![allow(dead_code)]

use std::sync::atomic::{AtomicU64, Ordering};

use stepcascade_core::oracle::{Decision, Generator, OracleError, VerificationQuery, VerificationVerdict, Verifier};
use stepcascade_core::step::{ReasoningContext, Step, StepEnd};

pub const MARKER: &str = "\\boxed";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefOutcome {
    pub steps: Vec<String>,
    pub decisions: Vec<Decision>,
}

fn terminal(step: &Step) -> bool {
    step.end == StepEnd::EndOfSequence || step.text.contains(MARKER)
}

/// Draft, verify with a single judge, commit; no gate and no ledger.
pub fn reference_run(
    prompt: &str,
    k: usize,
    draft: &dyn Generator,
    target: &dyn Generator,
    judge: &dyn Verifier,
) -> RefOutcome {
    let mut ctx = ReasoningContext::new(prompt, usize::MAX / 4).unwrap();
    let mut decisions = Vec::new();
    loop {
        let mut drafts: Vec<Step> = Vec::new();
        while drafts.len() < k {
            match draft.generate(&ctx, &drafts) {
                Ok(g) => {
                    let stop = terminal(&g.step);
                    drafts.push(g.step);
                    if stop {
                        break;
                    }
                }
                Err(OracleError::Exhausted) => break,
                Err(e) => panic!("{e}"),
            }
        }
        let mut rivals = Vec::new();
        for j in 0..drafts.len() {
            match target.generate(&ctx, &drafts[..j]) {
                Ok(g) => rivals.push(g.step),
                Err(OracleError::Exhausted) => break,
                Err(e) => panic!("{e}"),
            }
        }
        if !drafts.is_empty() && rivals.is_empty() {
            break;
        }
        let mut m = 0;
        for j in 0..rivals.len() {
            let q = VerificationQuery::new(&ctx, &drafts[..j], &drafts[j], &rivals[j]).unwrap();
            let d = judge.verify(&q).unwrap().decision;
            decisions.push(d);
            if d == Decision::Reject {
                break;
            }
            m += 1;
        }
        let appended: Vec<Step> = if m > 0 {
            drafts[..m].to_vec()
        } else {
            match target.generate(&ctx, &[]) {
                Ok(g) => vec![g.step],
                Err(OracleError::Exhausted) => break,
                Err(e) => panic!("{e}"),
            }
        };
        let stop = appended.last().is_some_and(terminal);
        for s in appended {
            ctx.push(s).unwrap();
        }
        if stop {
            break;
        }
    }
    RefOutcome { steps: ctx.accepted_steps.iter().map(|s| s.text.clone()).collect(), decisions }
}

/// Counts calls to a verifier and accumulates their price.
pub struct Metered<'a> {
    inner: &'a dyn Verifier,
    price: f64,
    calls: AtomicU64,
}

impl<'a> Metered<'a> {
    pub fn new(inner: &'a dyn Verifier, price: f64) -> Self {
        Self { inner, price, calls: AtomicU64::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn spent(&self) -> f64 {
        self.calls() as f64 * self.price
    }
}

impl Verifier for Metered<'_> {
    fn verify(&self, query: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.verify(query)
    }
}

mod common;

use std::sync::Mutex;

use proptest::prelude::*;
use stepcascade_core::cascade::{run_target_only, CascadeEngine, ModelRole};
use stepcascade_core::config::{Gate, RejectPolicy, RunConfig};
use stepcascade_core::oracle::{
    Decision, Generation, Generator, OracleError, Tier, VerificationQuery, VerificationVerdict, Verifier,
};
use stepcascade_core::simworld::{CalibrationProfile, SimRunOptions, SimWorld, SimWorldSpec, VerifierKind};
use stepcascade_core::step::{ReasoningContext, Step, StepOrigin};
use stepcascade_core::trace::{ReasoningTrace, Termination};

/// Emits `"{tag} {position}"` forever.
struct Counting(&'static str);

impl Generator for Counting {
    fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError> {
        let n = context.len() + prefix.len();
        Ok(Generation::autoregressive(Step::new(format!("{} {n}", self.0), StepOrigin::Draft)))
    }
}

/// Returns scripted decisions in call order, then accepts.
struct Scripted {
    decisions: Mutex<Vec<Decision>>,
    confidence: f64,
}

impl Scripted {
    fn new(mut decisions: Vec<Decision>, confidence: f64) -> Self {
        decisions.reverse();
        Self { decisions: Mutex::new(decisions), confidence }
    }
}

impl Verifier for Scripted {
    fn verify(&self, _: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError> {
        let d = self.decisions.lock().unwrap().pop().unwrap_or(Decision::Accept);
        Ok(VerificationVerdict { decision: d, confidence: self.confidence, tier: Tier::Draft })
    }
}

use Decision::{Accept as A, Reject as R};

fn one_iteration(decisions: Vec<Decision>, policy: RejectPolicy) -> (ReasoningContext, stepcascade_core::trace::IterationRecord) {
    let (draft, target) = (Counting("draft"), Counting("target"));
    let dv = Scripted::new(decisions, 0.99);
    let tv = Scripted::new(vec![], 0.99);
    let cfg = RunConfig { draft_steps: 5, reject_policy: policy, ..Default::default() };
    let engine = CascadeEngine::new(cfg, ModelRole::new(&draft, &dv), ModelRole::new(&target, &tv)).unwrap();
    let ctx = ReasoningContext::new("question", 1000).unwrap();
    engine.run_iteration(&ctx).unwrap()
}

#[test]
fn full_acceptance() {
    let (ctx, rec) = one_iteration(vec![A; 5], RejectPolicy::Regenerate);
    assert_eq!(rec.accepted_count, 5);
    assert!(!rec.fallback_used);
    assert_eq!(ctx.len(), 5);
    assert_eq!(rec.verdicts.len(), 5);
}

#[test]
fn first_reject_regenerates_one_target_step() {
    let (ctx, rec) = one_iteration(vec![R], RejectPolicy::Regenerate);
    assert_eq!(rec.accepted_count, 0);
    assert!(rec.fallback_used);
    assert_eq!(ctx.len(), 1);
    assert_eq!(ctx.accepted_steps[0].origin, StepOrigin::Fallback);
    assert_eq!(ctx.accepted_steps[0].text, "target 0");
    assert_eq!(rec.ledger.fallbacks, 1);
    assert!(rec.ledger.fallback_gen_passes > 0);
}

#[test]
fn verification_stops_at_first_reject() {
    let (ctx, rec) = one_iteration(vec![A, A, R, A, A], RejectPolicy::Regenerate);
    assert_eq!(rec.accepted_count, 2);
    assert_eq!(rec.verdicts.len(), 3);
    assert_eq!(rec.drafted.len(), 5);
    assert_eq!(ctx.len(), 2);
    assert_eq!(rec.ledger.draft_verify_calls, 3);
}

#[test]
fn adopt_policy_appends_rival_step() {
    let (ctx, rec) = one_iteration(vec![A, A, R], RejectPolicy::AdoptTargetStep);
    let texts: Vec<_> = ctx.accepted_steps.iter().map(|s| s.text.as_str()).collect();
    assert_eq!(texts, ["draft 0", "draft 1", "target 2"]);
    assert_eq!(rec.ledger.adopted_target_steps, 1);

    let (ctx, rec) = one_iteration(vec![R], RejectPolicy::AdoptTargetStep);
    assert_eq!(ctx.accepted_steps[0].text, "target 0");
    assert_eq!(rec.ledger.fallback_gen_passes, 0, "no regeneration under adopt");
}

#[test]
fn tree_prefers_more_confident_candidate() {
    struct Candidates;
    impl Generator for Candidates {
        fn generate(&self, c: &ReasoningContext, p: &[Step]) -> Result<Generation, OracleError> {
            self.generate_candidate(c, p, 0)
        }
        fn generate_candidate(&self, c: &ReasoningContext, p: &[Step], i: usize) -> Result<Generation, OracleError> {
            let n = c.len() + p.len();
            Ok(Generation::autoregressive(Step::new(format!("cand{i} at {n}"), StepOrigin::Draft)))
        }
    }
    struct ByCandidate;
    impl Verifier for ByCandidate {
        fn verify(&self, q: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError> {
            let c = if q.draft_step.text.starts_with("cand1") { 0.92 } else { 0.8 };
            Ok(VerificationVerdict { decision: Decision::Accept, confidence: c, tier: Tier::Draft })
        }
    }
    let target = Counting("target");
    let tv = Scripted::new(vec![], 0.99);
    let cfg = RunConfig { gamma: Gate::Threshold(0.5), draft_steps: 2, tree_width: 2, ..Default::default() };
    let engine = CascadeEngine::new(cfg, ModelRole::new(&Candidates, &ByCandidate), ModelRole::new(&target, &tv)).unwrap();
    let (ctx, rec) = engine.run_iteration(&ReasoningContext::new("q", 1000).unwrap()).unwrap();
    assert_eq!(rec.layers[0].selected, Some(1));
    assert_eq!(ctx.accepted_steps[0].text, "cand1 at 0");
    assert_eq!(ctx.accepted_steps[1].text, "cand1 at 1");
    assert_eq!(rec.ledger.draft_verify_calls, 4);
    assert_eq!(rec.ledger.candidates_discarded, 2);
}

#[test]
fn tree_all_rejected_falls_back() {
    let world = SimWorld::new(SimWorldSpec {
        draft_step_accuracy: 0.0,
        draft_verifier: CalibrationProfile::perfect(),
        ..Default::default()
    })
    .unwrap();
    let (d, t) = (world.draft_model(), world.target_model());
    let (dv, tv) = (world.verifier(Tier::Draft), world.verifier(Tier::Target));
    let cfg = RunConfig { tree_width: 4, ..Default::default() };
    let engine = CascadeEngine::new(cfg, ModelRole::new(&d, &dv), ModelRole::new(&t, &tv)).unwrap();
    let (ctx, rec) = engine.run_iteration(&ReasoningContext::new(world.prompt(0), 10_000).unwrap()).unwrap();
    assert_eq!(rec.accepted_count, 0);
    assert!(rec.fallback_used);
    assert_eq!(rec.layers.len(), 1);
    assert_eq!(rec.layers[0].verdicts.len(), 4);
    assert_eq!(ctx.len(), 1);
    assert_eq!(ctx.accepted_steps[0].text, world.task(0).solution()[0]);
}

#[test]
fn ten_step_task_with_perfect_models() {
    let world = SimWorld::new(SimWorldSpec {
        chain_length: 10,
        draft_step_accuracy: 1.0,
        draft_verifier: CalibrationProfile::perfect(),
        target_verifier: CalibrationProfile::perfect(),
        ..Default::default()
    })
    .unwrap();
    let r = world.run_trace(4, &RunConfig::default(), &SimRunOptions::default()).unwrap();
    assert_eq!(r.trace.steps().len(), 10);
    assert_eq!(r.trace.iterations.len(), 2);
    assert_eq!(r.trace.ledger.fallbacks, 0);
    assert_eq!(r.trace.termination, Termination::AnswerMarker);
    assert!(r.correct);
}

#[test]
fn wrong_draft_with_ground_truth_target_matches_target_only() {
    let world = SimWorld::new(SimWorldSpec { draft_step_accuracy: 0.0, ..Default::default() }).unwrap();
    let cfg = RunConfig { gamma: Gate::AlwaysEscalate, ..Default::default() };
    let opts = SimRunOptions { target_verifier: VerifierKind::GroundTruth, ..Default::default() };
    for task in 0..20 {
        let r = world.run_trace(task, &cfg, &opts).unwrap();
        assert!(r.trace.iterations.iter().all(|it| it.fallback_used));
        let reference = world.run_target_only(task, &cfg, None).unwrap();
        let texts = |t: &ReasoningTrace| t.steps().iter().map(|s| s.text.clone()).collect::<Vec<_>>();
        assert_eq!(texts(&r.trace), texts(&reference.trace));
    }
}

#[test]
fn budget_below_one_step_gives_empty_trace() {
    let world = SimWorld::new(SimWorldSpec::default()).unwrap();
    let prompt = world.prompt(0);
    let budget = prompt.split_whitespace().count() + 3;
    let cfg = RunConfig { token_budget: budget, ..Default::default() };
    let r = world.run_trace(0, &cfg, &SimRunOptions::default()).unwrap();
    assert!(r.trace.steps().is_empty());
    assert!(r.trace.budget_exhausted());
    let baseline = run_target_only(&prompt, &cfg, &world.target_model()).unwrap();
    assert!(baseline.steps().is_empty() && baseline.budget_exhausted());
}

#[test]
fn empty_prompt_rejected() {
    let (d, t) = (Counting("d"), Counting("t"));
    let v = Scripted::new(vec![], 0.9);
    let engine = CascadeEngine::new(RunConfig::default(), ModelRole::new(&d, &v), ModelRole::new(&t, &v)).unwrap();
    assert!(engine.run_trace("   ").is_err());
}

#[test]
fn generator_failure_surfaces() {
    struct Broken;
    impl Generator for Broken {
        fn generate(&self, _: &ReasoningContext, _: &[Step]) -> Result<Generation, OracleError> {
            Err(OracleError::Backend { message: "down".into(), attempts: 3 })
        }
    }
    let d = Counting("d");
    let v = Scripted::new(vec![], 0.9);
    let engine = CascadeEngine::new(RunConfig::default(), ModelRole::new(&d, &v), ModelRole::new(&Broken, &v)).unwrap();
    let err = engine.run_iteration(&ReasoningContext::new("q", 100).unwrap()).unwrap_err();
    assert!(matches!(err, stepcascade_core::CascadeError::Generation { tier: Tier::Target, .. }));
}

#[test]
fn concurrent_targets_match_sequential() {
    let world = SimWorld::new(SimWorldSpec::default()).unwrap();
    for task in 0..20 {
        let seq = world.run_trace(task, &RunConfig::default(), &SimRunOptions::default()).unwrap();
        let cfg = RunConfig { concurrent_targets: true, ..Default::default() };
        let par = world.run_trace(task, &cfg, &SimRunOptions::default()).unwrap();
        assert_eq!(seq.trace, par.trace);
    }
}

#[test]
fn trace_json_round_trip() {
    let world = SimWorld::new(SimWorldSpec::default()).unwrap();
    let r = world.run_trace(1, &RunConfig { tree_width: 2, ..Default::default() }, &SimRunOptions::default()).unwrap();
    let back = ReasoningTrace::from_json(&r.trace.to_json().unwrap()).unwrap();
    assert_eq!(back, r.trace);
}

fn arb_case() -> impl Strategy<Value = (SimWorldSpec, RunConfig, u64)> {
    (
        0.0f64..=1.0,
        0.0f64..=1.0,
        any::<u64>(),
        1usize..7,
        1usize..4,
        prop_oneof![(0.0f64..=1.0).prop_map(Gate::Threshold), Just(Gate::AlwaysEscalate)],
        prop_oneof![Just(RejectPolicy::Regenerate), Just(RejectPolicy::AdoptTargetStep)],
        40usize..400,
        0u64..50,
    )
        .prop_map(|(acc, mix, seed, k, w, gamma, policy, extra_budget, task)| {
            let spec = SimWorldSpec { draft_step_accuracy: acc, difficulty_mix: mix, seed, chain_length: 12, ..Default::default() };
            let cfg = RunConfig {
                gamma,
                draft_steps: k,
                tree_width: w,
                reject_policy: policy,
                token_budget: 40 + extra_budget,
                ..Default::default()
            };
            (spec, cfg, task)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn engine_invariants((spec, cfg, task) in arb_case()) {
        let world = SimWorld::new(spec).unwrap();
        let r = world.run_trace(task, &cfg, &SimRunOptions::default()).unwrap();
        let t = &r.trace;
        prop_assert!(t.ledger.is_conserved());
        prop_assert!(t.context.tokens_used <= t.context.token_budget);
        let steps: u64 = t.steps().iter().map(|s| s.estimated_tokens as u64).sum();
        prop_assert_eq!(steps, t.ledger.trace_tokens);
        for it in &t.iterations {
            prop_assert_eq!(it.fallback_used, it.accepted_count == 0);
            prop_assert!(it.accepted_count * cfg.tree_width <= it.drafted.len());
            prop_assert!(it.ledger.target_verify_calls <= it.ledger.draft_verify_calls);
            if cfg.tree_width == 1 {
                let rejected = it.verdicts.iter().any(|v| !v.is_accept());
                let want = it.accepted_count + rejected as usize;
                prop_assert_eq!(it.verdicts.len(), want);
                // Nothing is judged after the first rejection.
                prop_assert!(it.verdicts.iter().take(it.verdicts.len().saturating_sub(1)).all(|v| v.is_accept()));
            }
        }
    }

    #[test]
    fn width_one_tree_matches_linear((spec, cfg, task) in arb_case()) {
        let world = SimWorld::new(spec).unwrap();
        let cfg = RunConfig { tree_width: 1, ..cfg };
        let (d, t) = (world.draft_model(), world.target_model());
        let (dv, tv) = (world.verifier(Tier::Draft), world.verifier(Tier::Target));
        let prompt = world.prompt(task);
        let linear = CascadeEngine::new(cfg.clone(), ModelRole::new(&d, &dv), ModelRole::new(&t, &tv)).unwrap();
        let tree = CascadeEngine::new(cfg, ModelRole::new(&d, &dv), ModelRole::new(&t, &tv)).unwrap().force_tree_mode();
        let a = linear.run_trace(&prompt);
        let b = tree.run_trace(&prompt);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a.to_json().unwrap(), b.to_json().unwrap()),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn escalations_non_decreasing_in_gamma(seed in any::<u64>(), task in 0u64..100, g1 in 0.0f64..=1.0, g2 in 0.0f64..=1.0) {
        // One iteration from the same context sees the same drafts and the
        // same draft verdicts under either gate.
        let world = SimWorld::new(SimWorldSpec { seed, ..Default::default() }).unwrap();
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let (d, t) = (world.draft_model(), world.target_model());
        let (dv, tv) = (world.verifier(Tier::Draft), world.verifier(Tier::Target));
        let ctx = ReasoningContext::new(world.prompt(task), 10_000).unwrap();
        let escalations = |g: f64| {
            let cfg = RunConfig { gamma: Gate::Threshold(g), ..Default::default() };
            let engine = CascadeEngine::new(cfg, ModelRole::new(&d, &dv), ModelRole::new(&t, &tv)).unwrap();
            let (_, rec) = engine.run_iteration(&ctx).unwrap();
            let first_reject = rec.verdicts.iter().position(|v| !v.is_accept()).unwrap_or(rec.verdicts.len());
            (rec.ledger.target_verify_calls, first_reject)
        };
        let ((a, ra), (b, rb)) = (escalations(lo), escalations(hi));
        // A stricter gate judges no more steps, but escalates every one it
        // would have kept without asking.
        prop_assert!(rb <= ra);
        if ra == rb {
            prop_assert!(a <= b);
        }
    }
}

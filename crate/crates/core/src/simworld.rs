//! Synthetic reasoning environment with computable ground truth.
//!
//! A task is a chain of modular arithmetic operations. Each step states the
//! operation and the value it produces, e.g.
//! `apply add 5 to the running value giving 10`; the last step also carries
//! `so the answer is \boxed{v}`. Two steps are equivalent when they leave the
//! running value in the same state, which makes equivalence exactly
//! decidable.
//!
//! The target model always emits the correct step. The draft model is right
//! with probability `draft_step_accuracy` and otherwise asserts a perturbed
//! value. Simulated verifiers are right with a per-difficulty probability
//! and report a confidence derived from that probability.
//!
//! All randomness is counter-based: every draw is keyed by the world seed and
//! the coordinates of the call, so results never depend on call order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{run_target_only, CascadeEngine, CascadeError, ModelRole};
use crate::config::RunConfig;
use crate::metrics::CalibrationRecord;
use crate::ngram::{PldConfig, PromptLookupGenerator, TokenStream};
use crate::oracle::{
    Decision, Generation, Generator, OracleError, Tier, VerificationQuery, VerificationVerdict, Verifier,
};
use crate::step::{ReasoningContext, Step, StepEnd, StepOrigin};
use crate::trace::ReasoningTrace;

pub const ANSWER_MARKER: &str = "\\boxed";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("cannot parse step {0:?}")]
    Unparseable(String),
    #[error("prompt is not a simworld task: {0:?}")]
    NotATask(String),
}

impl From<SimError> for OracleError {
    fn from(e: SimError) -> Self {
        OracleError::Invalid(e.to_string())
    }
}

/// How reliably a simulated verifier judges easy and hard steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationProfile {
    pub easy_accuracy: f64,
    pub hard_accuracy: f64,
    /// Half-width of the uniform jitter applied to reported confidence.
    pub confidence_noise: f64,
    /// Shift of reported confidence above the class accuracy
    /// (overconfidence when positive).
    pub confidence_bias: f64,
    /// Share of would-be false rejections answered with accept instead,
    /// skewing errors toward accepting.
    pub lenience: f64,
}

impl Default for CalibrationProfile {
    fn default() -> Self {
        Self { easy_accuracy: 0.95, hard_accuracy: 0.6, confidence_noise: 0.02, confidence_bias: 0.0, lenience: 1.0 }
    }
}

impl CalibrationProfile {
    pub fn perfect() -> Self {
        Self { easy_accuracy: 1.0, hard_accuracy: 1.0, confidence_noise: 0.0, confidence_bias: 0.0, lenience: 0.0 }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.easy_accuracy) || !unit(self.hard_accuracy) {
            return Err(SimError::InvalidSpec("verifier accuracies must lie in [0, 1]".into()));
        }
        if self.easy_accuracy < self.hard_accuracy {
            return Err(SimError::InvalidSpec("easy_accuracy must be at least hard_accuracy".into()));
        }
        if !(0.0..=0.5).contains(&self.confidence_noise) {
            return Err(SimError::InvalidSpec("confidence_noise must lie in [0, 0.5]".into()));
        }
        if !unit(self.lenience) {
            return Err(SimError::InvalidSpec("lenience must lie in [0, 1]".into()));
        }
        if !(-1.0..=1.0).contains(&self.confidence_bias) {
            return Err(SimError::InvalidSpec("confidence_bias must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    fn accuracy(&self, hard: bool) -> f64 {
        if hard {
            self.hard_accuracy
        } else {
            self.easy_accuracy
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimWorldSpec {
    pub chain_length: usize,
    pub modulus: u64,
    pub draft_step_accuracy: f64,
    pub draft_verifier: CalibrationProfile,
    pub target_verifier: CalibrationProfile,
    /// Fraction of steps that are hard to verify.
    pub difficulty_mix: f64,
    pub seed: u64,
}

impl Default for SimWorldSpec {
    fn default() -> Self {
        Self {
            chain_length: 20,
            modulus: 97,
            draft_step_accuracy: 0.9,
            draft_verifier: CalibrationProfile::default(),
            target_verifier: CalibrationProfile {
                easy_accuracy: 0.99,
                hard_accuracy: 0.97,
                confidence_noise: 0.0,
                confidence_bias: 0.0,
                lenience: 0.0,
            },
            difficulty_mix: 0.3,
            seed: 0,
        }
    }
}

impl SimWorldSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.chain_length == 0 {
            return Err(SimError::InvalidSpec("chain_length must be at least 1".into()));
        }
        if self.modulus < 2 {
            return Err(SimError::InvalidSpec("modulus must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.draft_step_accuracy) {
            return Err(SimError::InvalidSpec("draft_step_accuracy must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.difficulty_mix) {
            return Err(SimError::InvalidSpec("difficulty_mix must lie in [0, 1]".into()));
        }
        self.draft_verifier.validate()?;
        self.target_verifier.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Add,
    Mul,
}

impl Op {
    pub fn apply(self, state: u64, operand: u64, modulus: u64) -> u64 {
        let (s, x, m) = (state as u128, operand as u128, modulus as u128);
        (match self {
            Op::Add => (s + x) % m,
            Op::Mul => (s * x) % m,
        }) as u64
    }

    fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Mul => "mul",
        }
    }
}

/// A step read as a state transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SimStep {
    pub op: Op,
    pub operand: u64,
    pub resulting_state: u64,
    pub is_final: bool,
}

impl SimStep {
    /// The correct transition from `prior`.
    pub fn correct(op: Op, operand: u64, prior: u64, modulus: u64) -> Self {
        Self { op, operand, resulting_state: op.apply(prior, operand, modulus), is_final: false }
    }

    pub fn render(&self) -> String {
        let mut text = format!(
            "apply {} {} to the running value giving {}",
            self.op.name(),
            self.operand,
            self.resulting_state
        );
        if self.is_final {
            text.push_str(&format!(" so the answer is {ANSWER_MARKER}{{{}}}", self.resulting_state));
        }
        text
    }

    /// Parses step text. Text that names only an operation (`"add 5"`)
    /// resolves its value from `prior`.
    pub fn parse(text: &str, prior: u64, modulus: u64) -> Result<Self, SimError> {
        let bad = || SimError::Unparseable(text.to_owned());
        let tokens: Vec<&str> = text.split_whitespace().collect();
        let at = tokens.iter().position(|t| *t == "add" || *t == "mul").ok_or_else(bad)?;
        let op = if tokens[at] == "add" { Op::Add } else { Op::Mul };
        let operand: u64 = tokens.get(at + 1).and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let claimed = match tokens.iter().position(|t| *t == "giving") {
            Some(g) => Some(tokens.get(g + 1).and_then(|t| t.parse::<u64>().ok()).ok_or_else(bad)?),
            None => None,
        };
        let resulting_state = match claimed {
            Some(v) if v >= modulus => return Err(bad()),
            Some(v) => v,
            None => op.apply(prior, operand, modulus),
        };
        Ok(Self { op, operand, resulting_state, is_final: text.contains(ANSWER_MARKER) })
    }
}

/// Whether two steps leave the running value in the same state from `prior`.
pub fn ground_truth_equivalent(step_a: &str, step_b: &str, prior_state: u64, modulus: u64) -> Result<bool, SimError> {
    let a = SimStep::parse(step_a, prior_state, modulus)?;
    let b = SimStep::parse(step_b, prior_state, modulus)?;
    Ok(a.resulting_state == b.resulting_state)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimTask {
    pub id: u64,
    pub initial: u64,
    pub ops: Vec<(Op, u64)>,
    pub modulus: u64,
}

impl SimTask {
    pub fn answer(&self) -> u64 {
        self.ops.iter().fold(self.initial, |s, &(op, x)| op.apply(s, x, self.modulus))
    }

    pub fn prompt(&self) -> String {
        format!(
            "task {} : start at {} and apply {} operations modulo {} ; each step reads apply <op> <operand> to the running value giving <value>",
            self.id,
            self.initial,
            self.ops.len(),
            self.modulus
        )
    }

    /// The ground-truth chain of steps.
    pub fn solution(&self) -> Vec<String> {
        let mut state = self.initial;
        let n = self.ops.len();
        self.ops
            .iter()
            .enumerate()
            .map(|(i, &(op, x))| {
                let mut s = SimStep::correct(op, x, state, self.modulus);
                s.is_final = i + 1 == n;
                state = s.resulting_state;
                s.render()
            })
            .collect()
    }
}

// Stream tags for counter-based randomness.
const STREAM_TASK: u64 = 1;
const STREAM_DIFFICULTY: u64 = 2;
const STREAM_DRAFT: u64 = 3;
const STREAM_VERIFY: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key(coords: &[u64]) -> u64 {
    coords.iter().fold(0x5EED_u64, |acc, &c| splitmix(acc ^ splitmix(c)))
}

fn text_key(text: &str) -> u64 {
    // FNV-1a, then mixed; stable across platforms and releases.
    let h = text.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix(h)
}

/// Where a query or generation sits within a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Position {
    pub task: u64,
    pub index: usize,
    pub prior_state: u64,
}

#[derive(Debug, Clone)]
pub struct SimWorld {
    spec: SimWorldSpec,
}

impl SimWorld {
    pub fn new(spec: SimWorldSpec) -> Result<Self, SimError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &SimWorldSpec {
        &self.spec
    }

    fn rng(&self, coords: &[u64]) -> ChaCha8Rng {
        let mut all = Vec::with_capacity(coords.len() + 1);
        all.push(self.spec.seed);
        all.extend_from_slice(coords);
        ChaCha8Rng::seed_from_u64(key(&all))
    }

    pub fn task(&self, id: u64) -> SimTask {
        let m = self.spec.modulus;
        let mut rng = self.rng(&[STREAM_TASK, id]);
        let initial = rng.random_range(0..m);
        let ops = (0..self.spec.chain_length)
            .map(|_| {
                // Mul needs a unit operand to stay invertible for prime moduli;
                // small moduli fall back to add.
                if m > 3 && rng.random_bool(0.5) {
                    (Op::Mul, rng.random_range(2..m))
                } else {
                    (Op::Add, rng.random_range(1..m))
                }
            })
            .collect();
        SimTask { id, initial, ops, modulus: m }
    }

    pub fn prompt(&self, id: u64) -> String {
        self.task(id).prompt()
    }

    fn task_id(prompt: &str) -> Result<u64, SimError> {
        let mut it = prompt.split_whitespace();
        match (it.next(), it.next().and_then(|t| t.parse().ok())) {
            (Some("task"), Some(id)) => Ok(id),
            _ => Err(SimError::NotATask(prompt.chars().take(40).collect())),
        }
    }

    /// Decodes task, step index and running value after `context ⊕ prefix`.
    pub fn locate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Position, SimError> {
        let id = Self::task_id(&context.prompt)?;
        let task = self.task(id);
        let mut state = task.initial;
        for step in context.accepted_steps.iter().chain(prefix) {
            state = SimStep::parse(&step.text, state, task.modulus)?.resulting_state;
        }
        Ok(Position { task: id, index: context.len() + prefix.len(), prior_state: state })
    }

    pub fn is_hard(&self, task: u64, index: usize) -> bool {
        self.rng(&[STREAM_DIFFICULTY, task, index as u64]).random::<f64>() < self.spec.difficulty_mix
    }

    /// The correct step at `pos`, or `None` past the end of the chain.
    pub fn target_step_at(&self, pos: Position) -> Option<SimStep> {
        let task = self.task(pos.task);
        let &(op, x) = task.ops.get(pos.index)?;
        let mut s = SimStep::correct(op, x, pos.prior_state, task.modulus);
        s.is_final = pos.index + 1 == task.ops.len();
        Some(s)
    }

    /// The `candidate`-th draft sample at `pos`.
    pub fn draft_step_at(&self, pos: Position, candidate: usize) -> Option<SimStep> {
        let truth = self.target_step_at(pos)?;
        let m = self.spec.modulus;
        let mut rng = self.rng(&[STREAM_DRAFT, pos.task, pos.index as u64, pos.prior_state, candidate as u64]);
        let correct = rng.random::<f64>() < self.spec.draft_step_accuracy;
        let paraphrase = rng.random_bool(0.5);
        let delta = rng.random_range(1..m);
        let mut s = truth;
        if !correct {
            s.resulting_state = (truth.resulting_state + delta) % m;
        } else if paraphrase {
            // Same value reached by an addition.
            s.op = Op::Add;
            s.operand = (truth.resulting_state + m - pos.prior_state % m) % m;
        }
        Some(s)
    }

    fn to_step(&self, s: SimStep, origin: StepOrigin) -> Step {
        let end = if s.is_final { StepEnd::EndOfSequence } else { StepEnd::Delimiter };
        Step::new(s.render(), origin).with_end(end)
    }

    /// Simulated verdict of `tier` on a (draft, target) pair at `pos`.
    pub fn verify_at(&self, tier: Tier, pos: Position, draft: &str, target: &str) -> Result<VerificationVerdict, SimError> {
        let truth = ground_truth_equivalent(draft, target, pos.prior_state, self.spec.modulus)?;
        let profile = match tier {
            Tier::Draft => &self.spec.draft_verifier,
            Tier::Target => &self.spec.target_verifier,
        };
        let accuracy = profile.accuracy(self.is_hard(pos.task, pos.index));
        let tier_tag = match tier {
            Tier::Draft => 0,
            Tier::Target => 1,
        };
        let mut rng = self.rng(&[
            STREAM_VERIFY,
            tier_tag,
            pos.task,
            pos.index as u64,
            pos.prior_state,
            text_key(draft),
            text_key(target),
        ]);
        let right = rng.random::<f64>() < accuracy;
        let jitter = profile.confidence_noise * (2.0 * rng.random::<f64>() - 1.0);
        let lenient = rng.random::<f64>() < profile.lenience;
        let accept = if truth { right || lenient } else { !right };
        let decision = Decision::from_accept(accept);
        let confidence = (accuracy + profile.confidence_bias + jitter).clamp(0.5, 1.0);
        Ok(VerificationVerdict { decision, confidence, tier })
    }

    /// Draft-tier verdicts at random positions, scored against ground truth.
    pub fn calibration_records(&self, tier: Tier, samples: usize) -> Vec<CalibrationRecord> {
        let n = self.spec.chain_length;
        (0..samples)
            .map(|i| {
                let task = self.task((i / n) as u64);
                let index = i % n;
                let prior = task.ops[..index].iter().fold(task.initial, |s, &(op, x)| op.apply(s, x, task.modulus));
                let pos = Position { task: task.id, index, prior_state: prior };
                let draft = self.draft_step_at(pos, 0).expect("index within chain").render();
                let target = self.target_step_at(pos).expect("index within chain").render();
                let v = self.verify_at(tier, pos, &draft, &target).expect("well-formed steps");
                let truth = ground_truth_equivalent(&draft, &target, prior, task.modulus).expect("well-formed steps");
                CalibrationRecord { confidence: v.confidence, correct: v.decision.is_accept() == truth }
            })
            .collect()
    }

    pub fn draft_model(&self) -> SimDraft<'_> {
        SimDraft { world: self }
    }

    pub fn target_model(&self) -> SimTarget<'_> {
        SimTarget { world: self }
    }

    pub fn verifier(&self, tier: Tier) -> SimVerifier<'_> {
        SimVerifier { world: self, tier }
    }

    pub fn ground_truth_verifier(&self) -> GroundTruthVerifier<'_> {
        GroundTruthVerifier { world: self }
    }

    /// True when the trace's final answer is the task's answer.
    pub fn is_correct(&self, task: u64, trace: &ReasoningTrace) -> bool {
        let want = self.task(task).answer().to_string();
        trace.final_answer.as_deref() == Some(want.as_str())
    }
}

/// Draft generator over a [`SimWorld`].
#[derive(Clone, Copy)]
pub struct SimDraft<'w> {
    world: &'w SimWorld,
}

impl Generator for SimDraft<'_> {
    fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError> {
        self.generate_candidate(context, prefix, 0)
    }

    fn generate_candidate(
        &self,
        context: &ReasoningContext,
        prefix: &[Step],
        index: usize,
    ) -> Result<Generation, OracleError> {
        let pos = self.world.locate(context, prefix)?;
        let s = self.world.draft_step_at(pos, index).ok_or(OracleError::Exhausted)?;
        Ok(Generation::autoregressive(self.world.to_step(s, StepOrigin::Draft)))
    }
}

/// Error-free target generator over a [`SimWorld`].
#[derive(Clone, Copy)]
pub struct SimTarget<'w> {
    world: &'w SimWorld,
}

impl Generator for SimTarget<'_> {
    fn generate(&self, context: &ReasoningContext, prefix: &[Step]) -> Result<Generation, OracleError> {
        let pos = self.world.locate(context, prefix)?;
        let s = self.world.target_step_at(pos).ok_or(OracleError::Exhausted)?;
        Ok(Generation::autoregressive(self.world.to_step(s, StepOrigin::Target)))
    }
}

impl TokenStream for SimTarget<'_> {
    fn next_token(
        &self,
        context: &ReasoningContext,
        prefix: &[Step],
        emitted: &[String],
    ) -> Result<Option<String>, OracleError> {
        let pos = self.world.locate(context, prefix)?;
        let s = self.world.target_step_at(pos).ok_or(OracleError::Exhausted)?;
        Ok(s.render().split_whitespace().nth(emitted.len()).map(str::to_owned))
    }

    fn step_end(&self, context: &ReasoningContext, prefix: &[Step], _tokens: &[String]) -> StepEnd {
        match self.world.locate(context, prefix).ok().and_then(|p| self.world.target_step_at(p)) {
            Some(s) if s.is_final => StepEnd::EndOfSequence,
            _ => StepEnd::Delimiter,
        }
    }
}

/// Profile-driven simulated verifier for one tier.
#[derive(Clone, Copy)]
pub struct SimVerifier<'w> {
    world: &'w SimWorld,
    tier: Tier,
}

impl Verifier for SimVerifier<'_> {
    fn verify(&self, query: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError> {
        let pos = self.world.locate(query.context, query.prefix)?;
        Ok(self.world.verify_at(self.tier, pos, &query.draft_step.text, &query.target_step.text)?)
    }
}

/// Verifier that always answers with the exact equivalence oracle.
#[derive(Clone, Copy)]
pub struct GroundTruthVerifier<'w> {
    world: &'w SimWorld,
}

impl Verifier for GroundTruthVerifier<'_> {
    fn verify(&self, query: &VerificationQuery<'_>) -> Result<VerificationVerdict, OracleError> {
        let pos = self.world.locate(query.context, query.prefix)?;
        let same = ground_truth_equivalent(
            &query.draft_step.text,
            &query.target_step.text,
            pos.prior_state,
            self.world.spec.modulus,
        )?;
        Ok(VerificationVerdict { decision: Decision::from_accept(same), confidence: 1.0, tier: Tier::Target })
    }
}

/// Which verifier fills each tier in a simulated run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    #[default]
    Profile,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimRunOptions {
    pub draft_verifier: VerifierKind,
    pub target_verifier: VerifierKind,
    /// Prompt-lookup decoding beneath target generations.
    pub pld: Option<PldConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTraceResult {
    pub task: u64,
    pub correct: bool,
    pub trace: ReasoningTrace,
}

impl SimWorld {
    /// Runs the speculation engine on task `task`.
    pub fn run_trace(&self, task: u64, config: &RunConfig, opts: &SimRunOptions) -> Result<SimTraceResult, CascadeError> {
        let draft_gen = self.draft_model();
        let target_gen = self.target_model();
        let pld_gen = opts.pld.map(|cfg| PromptLookupGenerator::new(target_gen, cfg));
        let target_generator: &dyn Generator = match &pld_gen {
            Some(g) => g,
            None => &target_gen,
        };
        let (dv, tv, gt) = (self.verifier(Tier::Draft), self.verifier(Tier::Target), self.ground_truth_verifier());
        let draft_verifier: &dyn Verifier = match opts.draft_verifier {
            VerifierKind::Profile => &dv,
            VerifierKind::GroundTruth => &gt,
        };
        let target_verifier: &dyn Verifier = match opts.target_verifier {
            VerifierKind::Profile => &tv,
            VerifierKind::GroundTruth => &gt,
        };
        let engine = CascadeEngine::new(
            config.clone(),
            ModelRole::new(&draft_gen, draft_verifier),
            ModelRole::new(target_generator, target_verifier),
        )?;
        let trace = engine.run_trace(&self.prompt(task))?;
        Ok(SimTraceResult { task, correct: self.is_correct(task, &trace), trace })
    }

    /// Target-only decoding of task `task`, optionally with prompt lookup.
    pub fn run_target_only(
        &self,
        task: u64,
        config: &RunConfig,
        pld: Option<PldConfig>,
    ) -> Result<SimTraceResult, CascadeError> {
        let target = self.target_model();
        let trace = match pld {
            Some(cfg) => run_target_only(&self.prompt(task), config, &PromptLookupGenerator::new(target, cfg))?,
            None => run_target_only(&self.prompt(task), config, &target)?,
        };
        Ok(SimTraceResult { task, correct: self.is_correct(task, &trace), trace })
    }
}

/// Operating point of a draft verifier: overall accuracy, accuracy at or
/// above the gate, and the share of verdicts at or above the gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    pub overall: f64,
    pub hiconf: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedProfile {
    pub profile: CalibrationProfile,
    pub difficulty_mix: f64,
    /// Expected operating point of the fitted parameters.
    pub predicted: CalibrationTarget,
    /// Largest absolute deviation of `predicted` from the requested target.
    pub max_deviation: f64,
}

/// Grid search for an easy/hard profile whose expected operating point at
/// `gamma` is closest to `target` in max-norm.
///
/// Easy steps are reported above the gate and hard steps below it, so
/// coverage is the easy share, hi-confidence accuracy is the easy accuracy,
/// and overall accuracy mixes in the hard accuracy. Targets that no mixture
/// can reach exactly get the nearest feasible point.
pub fn fit_profile(target: CalibrationTarget, gamma: f64) -> Result<FittedProfile, SimError> {
    const STEPS: usize = 200;
    let grid = |i: usize| i as f64 / STEPS as f64;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for ci in 0..=STEPS {
        let coverage = grid(ci);
        for hi in 0..=STEPS {
            let hiconf = grid(hi);
            let d_cov = (coverage - target.coverage).abs();
            let d_hi = (hiconf - target.hiconf).abs();
            if best.is_some_and(|b| d_cov.max(d_hi) >= b.0) {
                continue;
            }
            for li in 0..=hi {
                let low = grid(li);
                let overall = coverage * hiconf + (1.0 - coverage) * low;
                let dev = d_cov.max(d_hi).max((overall - target.overall).abs());
                if best.is_none_or(|b| dev < b.0) {
                    best = Some((dev, coverage, hiconf, low));
                }
            }
        }
    }
    let (max_deviation, coverage, hiconf, low) = best.expect("non-empty grid");
    let noise = 0.02;
    let bias = (gamma + noise + 0.01 - hiconf).max(0.0);
    if low.max(0.5) + bias + noise >= gamma {
        return Err(SimError::InvalidSpec(format!(
            "cannot separate easy and hard confidences at gamma {gamma}"
        )));
    }
    let profile = CalibrationProfile {
        easy_accuracy: hiconf,
        hard_accuracy: low,
        confidence_noise: noise,
        confidence_bias: bias,
        lenience: 0.0,
    };
    profile.validate()?;
    Ok(FittedProfile {
        profile,
        difficulty_mix: 1.0 - coverage,
        predicted: CalibrationTarget { overall: coverage * hiconf + (1.0 - coverage) * low, hiconf, coverage },
        max_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(spec: SimWorldSpec) -> SimWorld {
        SimWorld::new(spec).unwrap()
    }

    #[test]
    fn identical_operations_are_equivalent() {
        assert!(ground_truth_equivalent("add 3", "add 3", 5, 17).unwrap());
    }

    #[test]
    fn different_operations_same_result() {
        assert!(ground_truth_equivalent("add 5", "mul 2", 5, 17).unwrap());
    }

    #[test]
    fn distinct_results_not_equivalent() {
        for prior in 0..17 {
            assert!(!ground_truth_equivalent("add 1", "add 2", prior, 17).unwrap());
        }
    }

    #[test]
    fn equivalence_classes_match_direct_evaluation() {
        // Enumerate every (op, operand) pair and bucket by resulting state.
        let m = 17u64;
        let prior = 5u64;
        let ops: Vec<String> = (0..m).flat_map(|x| [format!("add {x}"), format!("mul {x}")]).collect();
        for a in &ops {
            for b in &ops {
                let eval = |s: &str| {
                    let (op, x) = s.split_once(' ').unwrap();
                    let x: u64 = x.parse().unwrap();
                    if op == "add" { (prior + x) % m } else { (prior * x) % m }
                };
                assert_eq!(ground_truth_equivalent(a, b, prior, m).unwrap(), eval(a) == eval(b), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn unparseable_step_is_an_error() {
        assert!(matches!(ground_truth_equivalent("hello", "add 1", 0, 7), Err(SimError::Unparseable(_))));
        assert!(ground_truth_equivalent("add 1 giving 99", "add 1", 0, 7).is_err());
    }

    #[test]
    fn claimed_value_wins_over_operation() {
        let s = SimStep::parse("apply add 5 to the running value giving 12", 5, 17).unwrap();
        assert_eq!(s.resulting_state, 12);
        let s = SimStep::parse(&SimStep::correct(Op::Mul, 3, 4, 17).render(), 0, 17).unwrap();
        assert_eq!(s.resulting_state, 12);
    }

    #[test]
    fn solution_reaches_answer() {
        let w = world(SimWorldSpec::default());
        for id in 0..20 {
            let task = w.task(id);
            let sol = task.solution();
            assert_eq!(sol.len(), w.spec().chain_length);
            let last = SimStep::parse(sol.last().unwrap(), 0, task.modulus).unwrap();
            assert!(last.is_final);
            assert_eq!(last.resulting_state, task.answer());
        }
    }

    #[test]
    fn perfect_draft_is_always_correct() {
        let w = world(SimWorldSpec { draft_step_accuracy: 1.0, ..Default::default() });
        let mut n = 0;
        for task in 0..1000u64 {
            let t = w.task(task);
            let mut prior = t.initial;
            for index in 0..t.ops.len() {
                let pos = Position { task, index, prior_state: prior };
                let d = w.draft_step_at(pos, 0).unwrap();
                let truth = w.target_step_at(pos).unwrap();
                assert_eq!(d.resulting_state, truth.resulting_state);
                prior = truth.resulting_state;
                n += 1;
            }
        }
        assert!(n >= 10_000);
    }

    #[test]
    fn draft_accuracy_matches_monte_carlo() {
        let w = world(SimWorldSpec { draft_step_accuracy: 0.7, chain_length: 10, ..Default::default() });
        let mut correct = 0usize;
        let total = 100_000usize;
        for i in 0..total {
            let pos = Position { task: (i / 10) as u64, index: i % 10, prior_state: (i % 97) as u64 };
            let d = w.draft_step_at(pos, 0).unwrap().render();
            let t = w.target_step_at(pos).unwrap().render();
            correct += ground_truth_equivalent(&d, &t, pos.prior_state, 97).unwrap() as usize;
        }
        let frac = correct as f64 / total as f64;
        assert!((frac - 0.7).abs() < 0.01, "{frac}");
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world(SimWorldSpec::default());
        let ctx = ReasoningContext::new(w.prompt(3), 10_000).unwrap();
        let d = w.draft_model();
        assert_eq!(d.generate(&ctx, &[]).unwrap(), d.generate(&ctx, &[]).unwrap());
        let w2 = world(SimWorldSpec::default());
        assert_eq!(w2.draft_model().generate(&ctx, &[]).unwrap(), d.generate(&ctx, &[]).unwrap());
    }

    #[test]
    fn perfect_verifier_is_certain() {
        let spec = SimWorldSpec { draft_verifier: CalibrationProfile::perfect(), difficulty_mix: 0.0, ..Default::default() };
        let w = world(spec);
        for r in w.calibration_records(Tier::Draft, 5000) {
            assert!(r.correct);
            assert_eq!(r.confidence, 1.0);
        }
    }

    #[test]
    fn locate_follows_claimed_values() {
        let w = world(SimWorldSpec::default());
        let task = w.task(9);
        let mut ctx = ReasoningContext::new(task.prompt(), 10_000).unwrap();
        let sol = task.solution();
        ctx.push(Step::new(sol[0].clone(), StepOrigin::Target)).unwrap();
        let pos = w.locate(&ctx, &[]).unwrap();
        assert_eq!(pos.index, 1);
        assert_eq!(pos.prior_state, SimStep::parse(&sol[0], 0, task.modulus).unwrap().resulting_state);
    }

    #[test]
    fn spec_validation() {
        assert!(SimWorldSpec { chain_length: 0, ..Default::default() }.validate().is_err());
        assert!(SimWorldSpec { modulus: 1, ..Default::default() }.validate().is_err());
        let inverted = CalibrationProfile { easy_accuracy: 0.5, hard_accuracy: 0.9, ..Default::default() };
        assert!(SimWorldSpec { draft_verifier: inverted, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn fit_reaches_feasible_target_exactly() {
        let f = fit_profile(CalibrationTarget { overall: 0.56, hiconf: 0.81, coverage: 0.61 }, 0.9).unwrap();
        assert!(f.max_deviation < 0.003, "{f:?}");
        assert!((f.difficulty_mix - 0.39).abs() < 1e-9);
    }

    #[test]
    fn fit_balances_infeasible_target() {
        // 0.85 coverage at 0.87 accuracy already exceeds 0.71 overall.
        let f = fit_profile(CalibrationTarget { overall: 0.71, hiconf: 0.87, coverage: 0.85 }, 0.9).unwrap();
        assert!(f.max_deviation > 0.005 && f.max_deviation < 0.015, "{f:?}");
    }
}

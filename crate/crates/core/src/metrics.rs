//! Cost accounting and calibration analysis.
//!
//! The [`CostLedger`] counts generation work and verification calls per tier.
//! A [`CostModel`] prices those counts in abstract units so runs can be
//! compared against target-only generation.
//!
//! Generation is priced per forward pass on the critical path: the target
//! steps of one speculation round are generated concurrently, so a round
//! costs as much as its longest member. Verification is priced per call.

use std::io;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("cascade rate undefined: no draft verifications recorded")]
    NoVerifications,
    #[error("speedup undefined: {0} cost is zero")]
    ZeroCost(&'static str),
    #[error("invalid cost model: {0}")]
    InvalidModel(String),
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("calibration report needs at least one record")]
    NoRecords,
    #[error("csv output failed: {0}")]
    Csv(String),
}

impl From<csv::Error> for MetricsError {
    fn from(e: csv::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

impl From<io::Error> for MetricsError {
    fn from(e: io::Error) -> Self {
        MetricsError::Csv(e.to_string())
    }
}

/// Work counters for one iteration, one trace, or a merged sweep cell.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostLedger {
    pub draft_gen_steps: u64,
    pub draft_gen_tokens: u64,
    pub target_gen_steps: u64,
    pub target_gen_tokens: u64,
    /// Target forward passes summed over all speculative target steps.
    pub target_gen_passes: u64,
    /// Target forward passes on the critical path (max per concurrent round).
    pub target_critical_passes: u64,
    pub fallback_gen_tokens: u64,
    pub fallback_gen_passes: u64,
    pub draft_verify_calls: u64,
    pub target_verify_calls: u64,
    /// Draft-tier verifier errors that were escalated instead.
    pub draft_verify_failures: u64,
    pub steps_accepted: u64,
    pub steps_rejected: u64,
    /// Accepted candidates that were not appended (tree siblings, budget).
    pub candidates_discarded: u64,
    pub fallbacks: u64,
    pub adopted_target_steps: u64,
    /// Tokens of all steps in the final context.
    pub trace_tokens: u64,
}

impl CostLedger {
    pub fn merge(&mut self, other: &CostLedger) {
        *self += *other;
    }

    pub fn acceptance_rate(&self) -> Option<f64> {
        (self.draft_gen_steps > 0).then(|| self.steps_accepted as f64 / self.draft_gen_steps as f64)
    }

    /// Holds for every ledger the engine produces.
    pub fn is_conserved(&self) -> bool {
        self.draft_verify_calls == self.steps_accepted + self.steps_rejected + self.candidates_discarded
            && self.target_verify_calls <= self.draft_verify_calls
    }
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, o: Self) {
        self.draft_gen_steps += o.draft_gen_steps;
        self.draft_gen_tokens += o.draft_gen_tokens;
        self.target_gen_steps += o.target_gen_steps;
        self.target_gen_tokens += o.target_gen_tokens;
        self.target_gen_passes += o.target_gen_passes;
        self.target_critical_passes += o.target_critical_passes;
        self.fallback_gen_tokens += o.fallback_gen_tokens;
        self.fallback_gen_passes += o.fallback_gen_passes;
        self.draft_verify_calls += o.draft_verify_calls;
        self.target_verify_calls += o.target_verify_calls;
        self.draft_verify_failures += o.draft_verify_failures;
        self.steps_accepted += o.steps_accepted;
        self.steps_rejected += o.steps_rejected;
        self.candidates_discarded += o.candidates_discarded;
        self.fallbacks += o.fallbacks;
        self.adopted_target_steps += o.adopted_target_steps;
        self.trace_tokens += o.trace_tokens;
    }
}

impl Add for CostLedger {
    type Output = CostLedger;

    fn add(mut self, rhs: Self) -> Self::Output {
        self += rhs;
        self
    }
}

impl<'a> std::iter::Sum<&'a CostLedger> for CostLedger {
    fn sum<I: Iterator<Item = &'a CostLedger>>(iter: I) -> Self {
        iter.fold(CostLedger::default(), |acc, l| acc + *l)
    }
}

/// Escalations per draft verification (α).
pub fn cascade_rate(ledger: &CostLedger) -> Result<f64, MetricsError> {
    if ledger.draft_verify_calls == 0 {
        return Err(MetricsError::NoVerifications);
    }
    Ok(ledger.target_verify_calls as f64 / ledger.draft_verify_calls as f64)
}

/// Prices in abstract units: generation per forward pass, verification per call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    pub c_gen_draft: f64,
    pub c_gen_target: f64,
    pub c_verify_draft: f64,
    pub c_verify_target: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { c_gen_draft: 1.0, c_gen_target: 20.0, c_verify_draft: 1.0, c_verify_target: 20.0 }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let all = [self.c_gen_draft, self.c_gen_target, self.c_verify_draft, self.c_verify_target];
        if all.iter().any(|c| !c.is_finite() || *c <= 0.0) {
            return Err(MetricsError::InvalidModel("all costs must be positive and finite".into()));
        }
        if self.c_verify_draft >= self.c_verify_target {
            return Err(MetricsError::InvalidModel("draft verification must cost less than target verification".into()));
        }
        Ok(())
    }

    pub fn verification_cost(&self, ledger: &CostLedger) -> f64 {
        ledger.draft_verify_calls as f64 * self.c_verify_draft
            + ledger.target_verify_calls as f64 * self.c_verify_target
    }

    pub fn generation_cost(&self, ledger: &CostLedger) -> f64 {
        ledger.draft_gen_tokens as f64 * self.c_gen_draft
            + (ledger.target_critical_passes + ledger.fallback_gen_passes) as f64 * self.c_gen_target
    }

    pub fn run_cost(&self, ledger: &CostLedger) -> f64 {
        self.generation_cost(ledger) + self.verification_cost(ledger)
    }

    /// Cost of producing the same trace with the target model alone.
    pub fn target_only_cost(&self, ledger: &CostLedger) -> f64 {
        ledger.trace_tokens as f64 * self.c_gen_target
    }
}

/// `c_vD + α · c_vT`.
pub fn expected_verification_cost(model: &CostModel, alpha: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(MetricsError::AlphaOutOfRange(alpha));
    }
    Ok(model.c_verify_draft + alpha * model.c_verify_target)
}

/// Target-only cost of the trace divided by the cost the run actually paid.
pub fn speedup_estimate(ledger: &CostLedger, model: &CostModel) -> Result<f64, MetricsError> {
    let baseline = model.target_only_cost(ledger);
    if baseline <= 0.0 {
        return Err(MetricsError::ZeroCost("baseline"));
    }
    let cost = model.run_cost(ledger);
    if cost <= 0.0 {
        return Err(MetricsError::ZeroCost("run"));
    }
    Ok(baseline / cost)
}

/// One verification outcome scored against a reference decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub confidence: f64,
    pub correct: bool,
}

pub const RELIABILITY_BUCKETS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBucket {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub mean_confidence: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub gamma: f64,
    pub records: u64,
    pub overall_accuracy: f64,
    /// Absent when no record reaches `gamma`.
    pub hiconf_accuracy: Option<f64>,
    pub lowconf_accuracy: Option<f64>,
    pub coverage: f64,
    pub buckets: Vec<ReliabilityBucket>,
}

fn bucket_of(confidence: f64) -> usize {
    (1..RELIABILITY_BUCKETS)
        .filter(|&k| confidence >= k as f64 / RELIABILITY_BUCKETS as f64)
        .count()
}

/// Overall vs high-confidence accuracy, coverage at `gamma`, and a
/// ten-bucket reliability table.
pub fn calibration_report(records: &[CalibrationRecord], gamma: f64) -> Result<CalibrationReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::NoRecords);
    }
    let n = records.len() as f64;
    let mut correct = 0u64;
    let (mut hi_n, mut hi_correct, mut lo_correct) = (0u64, 0u64, 0u64);
    let mut sums = [(0u64, 0.0f64, 0u64); RELIABILITY_BUCKETS];
    for r in records {
        correct += r.correct as u64;
        if r.confidence >= gamma {
            hi_n += 1;
            hi_correct += r.correct as u64;
        } else {
            lo_correct += r.correct as u64;
        }
        let b = &mut sums[bucket_of(r.confidence)];
        b.0 += 1;
        b.1 += r.confidence;
        b.2 += r.correct as u64;
    }
    let lo_n = records.len() as u64 - hi_n;
    let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
    let buckets = sums
        .iter()
        .enumerate()
        .map(|(i, &(count, conf_sum, ok))| ReliabilityBucket {
            lower: i as f64 / RELIABILITY_BUCKETS as f64,
            upper: (i + 1) as f64 / RELIABILITY_BUCKETS as f64,
            count,
            mean_confidence: (count > 0).then(|| conf_sum / count as f64),
            accuracy: ratio(ok, count),
        })
        .collect();
    Ok(CalibrationReport {
        gamma,
        records: records.len() as u64,
        overall_accuracy: correct as f64 / n,
        hiconf_accuracy: ratio(hi_correct, hi_n),
        lowconf_accuracy: ratio(lo_correct, lo_n),
        coverage: hi_n as f64 / n,
        buckets,
    })
}

impl CalibrationReport {
    /// Writes one CSV row per reliability bucket.
    pub fn write_buckets_csv<W: io::Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lower", "upper", "count", "mean_confidence", "accuracy"])?;
        for b in &self.buckets {
            w.write_record([
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                opt(b.mean_confidence),
                opt(b.accuracy),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

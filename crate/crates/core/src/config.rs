//! Engine run configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::step::BoundaryDelimiter;

/// Escalation gate applied to draft-tier confidence.
///
/// `Threshold(γ)` keeps the draft verdict when its confidence is at least γ.
/// `AlwaysEscalate` sends every decision to the target tier regardless of
/// confidence; it serializes as the string `"always-escalate"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Gate {
    Threshold(f64),
    AlwaysEscalate,
}

impl Gate {
    pub fn keeps_draft(&self, confidence: f64) -> bool {
        match *self {
            Gate::Threshold(gamma) => confidence >= gamma,
            Gate::AlwaysEscalate => false,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            Gate::Threshold(g) if !(0.0..=1.0).contains(&g) => Err(ConfigError::GammaOutOfRange(g)),
            _ => Ok(()),
        }
    }

    /// Sort key where larger means more escalation.
    pub fn strictness(&self) -> f64 {
        match *self {
            Gate::Threshold(g) => g,
            Gate::AlwaysEscalate => f64::INFINITY,
        }
    }
}

impl Default for Gate {
    fn default() -> Self {
        Gate::Threshold(0.9)
    }
}

impl fmt::Display for Gate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gate::Threshold(g) => write!(f, "{g}"),
            Gate::AlwaysEscalate => f.write_str("always-escalate"),
        }
    }
}

impl FromStr for Gate {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "always-escalate" | "always_escalate" => Ok(Gate::AlwaysEscalate),
            other => {
                let g: f64 = other.parse().map_err(|_| ConfigError::BadGate(other.to_owned()))?;
                let gate = Gate::Threshold(g);
                gate.validate()?;
                Ok(gate)
            }
        }
    }
}

impl Serialize for Gate {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match *self {
            Gate::Threshold(g) => serializer.serialize_f64(g),
            Gate::AlwaysEscalate => serializer.serialize_str("always-escalate"),
        }
    }
}

impl<'de> Deserialize<'de> for Gate {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        let gate = match Raw::deserialize(deserializer)? {
            Raw::Num(g) => Gate::Threshold(g),
            Raw::Int(g) => Gate::Threshold(g as f64),
            Raw::Str(s) => return s.parse().map_err(serde::de::Error::custom),
        };
        gate.validate().map_err(serde::de::Error::custom)?;
        Ok(gate)
    }
}

/// What happens to the target's rival step at the first rejection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectPolicy {
    /// Discard it; on an all-reject iteration the target regenerates a
    /// fresh step from the unmodified context.
    #[default]
    Regenerate,
    /// Append the already generated target step instead of discarding it.
    AdoptTargetStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: Gate,
    pub draft_steps: usize,
    pub tree_width: usize,
    pub token_budget: usize,
    pub seed: u64,
    pub reject_policy: RejectPolicy,
    /// A step containing this marker ends the trace.
    pub answer_marker: String,
    pub delimiter: BoundaryDelimiter,
    /// Dispatch the per-iteration target generations on worker threads.
    pub concurrent_targets: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gamma: Gate::default(),
            draft_steps: 5,
            tree_width: 1,
            token_budget: 32_768,
            seed: 0,
            reject_policy: RejectPolicy::Regenerate,
            answer_marker: "\\boxed".to_owned(),
            delimiter: BoundaryDelimiter::default(),
            concurrent_targets: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.gamma.validate()?;
        if self.draft_steps == 0 {
            return Err(ConfigError::ZeroDraftSteps);
        }
        if self.tree_width == 0 {
            return Err(ConfigError::ZeroTreeWidth);
        }
        if self.token_budget == 0 {
            return Err(ConfigError::ZeroBudget);
        }
        Ok(())
    }

    pub fn with_gamma(mut self, gamma: Gate) -> Self {
        self.gamma = gamma;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("gamma must lie in [0, 1], got {0}")]
    GammaOutOfRange(f64),
    #[error("gamma must be a number in [0, 1] or \"always-escalate\", got {0:?}")]
    BadGate(String),
    #[error("draft_steps must be at least 1")]
    ZeroDraftSteps,
    #[error("tree_width must be at least 1")]
    ZeroTreeWidth,
    #[error("token_budget must be positive")]
    ZeroBudget,
}

//! Step-level speculative reasoning with confidence-gated cascaded verification.
//!
//! A cheap draft model proposes reasoning steps, a target model produces
//! rival steps, and each pair is judged for equivalence. The draft model's
//! own verdict is trusted when its confidence clears a gate; otherwise the
//! target model is asked.
//!
//! ```
//! use stepcascade_core::{RunConfig, SimWorld, SimWorldSpec, SimRunOptions};
//!
//! let world = SimWorld::new(SimWorldSpec::default()).unwrap();
//! let run = world.run_trace(0, &RunConfig::default(), &SimRunOptions::default()).unwrap();
//! assert!(run.trace.ledger.is_conserved());
//! ```

pub mod backend;
pub mod cascade;
pub mod config;
pub mod metrics;
pub mod ngram;
pub mod oracle;
pub mod simworld;
pub mod step;
pub mod trace;

pub use cascade::{cascaded_verify, run_target_only, select_best_candidate, CascadeEngine, CascadeError, ModelRole};
pub use config::{ConfigError, Gate, RejectPolicy, RunConfig};
pub use metrics::{cascade_rate, speedup_estimate, CostLedger, CostModel, MetricsError};
pub use ngram::{NgramIndex, PldConfig, PromptLookupGenerator, TokenStream};
pub use oracle::{
    verdict_from_decision_probability, Decision, Generation, Generator, OracleError, Tier, VerificationQuery,
    VerificationVerdict, Verifier,
};
pub use simworld::{SimRunOptions, SimWorld, SimWorldSpec};
pub use step::{split_into_steps, BoundaryDelimiter, ReasoningContext, Step, StepEnd, StepError, StepOrigin};
pub use trace::{ReasoningTrace, Termination};

//! Experiment configuration: one TOML file plus `--set key.path=value`
//! overrides, which win over file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stepcascade_core::backend::{EndpointConfig, VerificationPromptTemplate};
use stepcascade_core::config::{Gate, RunConfig};
use stepcascade_core::metrics::CostModel;
use stepcascade_core::ngram::PldConfig;
use stepcascade_core::simworld::{CalibrationProfile, CalibrationTarget, SimRunOptions, SimWorldSpec, VerifierKind};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub sweep: Sweep,
    pub world: SimWorldSpec,
    pub sim: SimSettings,
    pub cost: CostModel,
    pub calibrate: CalibrateSettings,
    pub bench: Option<BenchSettings>,
}

/// Values swept over; an empty list means "the value in `run`".
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub gamma: Vec<Gate>,
    pub draft_steps: Vec<usize>,
    pub tree_width: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub traces: u64,
    pub first_task: u64,
    pub draft_verifier: VerifierKind,
    pub target_verifier: VerifierKind,
    pub pld: Option<PldConfig>,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            traces: 100,
            first_task: 0,
            draft_verifier: VerifierKind::Profile,
            target_verifier: VerifierKind::Profile,
            pld: None,
        }
    }
}

impl SimSettings {
    pub fn run_options(&self) -> SimRunOptions {
        SimRunOptions { draft_verifier: self.draft_verifier, target_verifier: self.target_verifier, pld: self.pld }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateSettings {
    pub samples: usize,
    pub gamma: f64,
    pub profiles: Vec<ProfileEntry>,
}

impl Default for CalibrateSettings {
    fn default() -> Self {
        let fit = |name: &str, overall, hiconf, coverage| ProfileEntry {
            name: name.into(),
            fit: Some(CalibrationTarget { overall, hiconf, coverage }),
            profile: None,
            difficulty_mix: None,
        };
        Self {
            samples: 100_000,
            gamma: 0.9,
            profiles: vec![
                fit("deepseek", 0.56, 0.81, 0.61),
                fit("qwen", 0.71, 0.87, 0.85),
                ProfileEntry {
                    name: "perfect".into(),
                    fit: None,
                    profile: Some(CalibrationProfile::perfect()),
                    difficulty_mix: None,
                },
            ],
        }
    }
}

/// A draft verifier to report on: either fitted to an operating point or
/// given directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<CalibrationTarget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<CalibrationProfile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty_mix: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSettings {
    /// One prompt per non-empty line. Relative paths resolve against the
    /// config file's directory.
    pub prompts: PathBuf,
    pub draft: EndpointConfig,
    pub target: EndpointConfig,
    #[serde(default)]
    pub template: VerificationPromptTemplate,
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults), applies overrides and the
    /// seed, and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: ExperimentConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
                let at = e.path().to_string();
                CliError::Config(format!("at `{at}`: {}", e.into_inner().message().trim()))
            })?;
        if let Some(seed) = seed {
            cfg.world.seed = seed;
            cfg.run.seed = seed;
        }
        if let (Some(bench), Some(p)) = (cfg.bench.as_mut(), path) {
            if bench.prompts.is_relative() {
                if let Some(dir) = p.parent() {
                    bench.prompts = dir.join(&bench.prompts);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.run.validate().map_err(|e| field("run", e))?;
        self.world.validate().map_err(|e| field("world", e))?;
        self.cost.validate().map_err(|e| field("cost", e))?;
        for (name, cells) in [("sweep.draft_steps", &self.sweep.draft_steps), ("sweep.tree_width", &self.sweep.tree_width)] {
            if cells.contains(&0) {
                return Err(CliError::Config(format!("at `{name}`: values must be positive")));
            }
        }
        if self.sim.traces == 0 {
            return Err(CliError::Config("at `sim.traces`: must be positive".into()));
        }
        if self.calibrate.samples == 0 {
            return Err(CliError::Config("at `calibrate.samples`: must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.calibrate.gamma) {
            return Err(CliError::Config("at `calibrate.gamma`: must lie in [0, 1]".into()));
        }
        for (i, p) in self.calibrate.profiles.iter().enumerate() {
            if p.fit.is_some() == p.profile.is_some() {
                return Err(CliError::Config(format!(
                    "at `calibrate.profiles[{i}]`: give exactly one of `fit` or `profile`"
                )));
            }
            if let Some(prof) = &p.profile {
                prof.validate().map_err(|e| field(&format!("calibrate.profiles[{i}].profile"), e))?;
            }
        }
        if let Some(b) = &self.bench {
            b.draft.validate().map_err(|e| field("bench.draft", e))?;
            b.target.validate().map_err(|e| field("bench.target", e))?;
        }
        Ok(())
    }

    /// Every (γ, k, W) cell of the sweep, with γ varying fastest.
    pub fn cells(&self) -> Vec<RunConfig> {
        let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
        let gammas = if self.sweep.gamma.is_empty() { vec![self.run.gamma] } else { self.sweep.gamma.clone() };
        let mut out = Vec::new();
        for w in or(&self.sweep.tree_width, self.run.tree_width) {
            for k in or(&self.sweep.draft_steps, self.run.draft_steps) {
                for &g in &gammas {
                    out.push(RunConfig { gamma: g, draft_steps: k, tree_width: w, ..self.run.clone() });
                }
            }
        }
        out
    }
}

fn field(at: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("at `{at}`: {e}"))
}

/// Sets `key.path` in `table`. The value is read as a TOML literal when it
/// parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_owned()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let slot = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stepcascade_core::metrics::{calibration_report, CalibrationReport};
use stepcascade_core::oracle::Tier;
use stepcascade_core::simworld::{fit_profile, CalibrationProfile, CalibrationTarget, SimWorld, SimWorldSpec};
use tracing::info;

use crate::config::{ExperimentConfig, ProfileEntry};
use crate::error::{CliError, CliResult};
use crate::report::{read_json, write_csv, write_json, RunManifest};

/// Everything reported about one draft verifier profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub name: String,
    pub profile: CalibrationProfile,
    pub difficulty_mix: f64,
    #[serde(default)]
    pub target: Option<CalibrationTarget>,
    /// Max-norm distance of the fitted model's expected point from `target`.
    #[serde(default)]
    pub fit_deviation: Option<f64>,
    pub report: CalibrationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub name: String,
    pub records: u64,
    pub gamma: f64,
    pub overall_accuracy: f64,
    pub hiconf_accuracy: Option<f64>,
    pub coverage: f64,
    pub target_overall: Option<f64>,
    pub target_hiconf: Option<f64>,
    pub target_coverage: Option<f64>,
    /// Largest absolute gap between the measured point and `target`.
    pub max_abs_error: Option<f64>,
}

impl From<&ProfileReport> for CalibrationRow {
    fn from(p: &ProfileReport) -> Self {
        let r = &p.report;
        let err = p.target.map(|t| {
            let hi = r.hiconf_accuracy.map_or(f64::INFINITY, |h| (h - t.hiconf).abs());
            (r.overall_accuracy - t.overall).abs().max(hi).max((r.coverage - t.coverage).abs())
        });
        Self {
            name: p.name.clone(),
            records: r.records,
            gamma: r.gamma,
            overall_accuracy: r.overall_accuracy,
            hiconf_accuracy: r.hiconf_accuracy,
            coverage: r.coverage,
            target_overall: p.target.map(|t| t.overall),
            target_hiconf: p.target.map(|t| t.hiconf),
            target_coverage: p.target.map(|t| t.coverage),
            max_abs_error: err,
        }
    }
}

fn evaluate(cfg: &ExperimentConfig, entry: &ProfileEntry) -> CliResult<ProfileReport> {
    let gamma = cfg.calibrate.gamma;
    let (profile, mix, deviation) = match (entry.fit, entry.profile) {
        (Some(target), _) => {
            let fit = fit_profile(target, gamma).map_err(|e| CliError::Config(format!("profile `{}`: {e}", entry.name)))?;
            (fit.profile, fit.difficulty_mix, Some(fit.max_deviation))
        }
        (None, Some(p)) => (p, entry.difficulty_mix.unwrap_or(cfg.world.difficulty_mix), None),
        (None, None) => unreachable!("validated config"),
    };
    let world = SimWorld::new(SimWorldSpec { draft_verifier: profile, difficulty_mix: mix, ..cfg.world.clone() })
        .map_err(|e| CliError::Config(format!("profile `{}`: {e}", entry.name)))?;
    let records = world.calibration_records(Tier::Draft, cfg.calibrate.samples);
    let report = calibration_report(&records, gamma).map_err(anyhow::Error::from)?;
    Ok(ProfileReport {
        name: entry.name.clone(),
        profile,
        difficulty_mix: mix,
        target: entry.fit,
        fit_deviation: deviation,
        report,
    })
}

fn write_reports(dir: &Path, reports: &[ProfileReport]) -> CliResult<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("calibration"))?;
    let mut outputs = Vec::new();
    for p in reports {
        let json = PathBuf::from("calibration").join(format!("{}.json", p.name));
        write_json(&dir.join(&json), p)?;
        let buckets = PathBuf::from("calibration").join(format!("{}_buckets.csv", p.name));
        p.report
            .write_buckets_csv(fs::File::create(dir.join(&buckets))?)
            .map_err(anyhow::Error::from)?;
        outputs.extend([json, buckets]);
    }
    let rows: Vec<CalibrationRow> = reports.iter().map(CalibrationRow::from).collect();
    write_csv(&dir.join("calibration.csv"), &rows)?;
    outputs.push("calibration.csv".into());
    Ok(outputs)
}

pub fn run(cfg: &ExperimentConfig, out_dir: &Path, pool: &rayon::ThreadPool) -> CliResult<Vec<PathBuf>> {
    let mut seen = std::collections::HashSet::new();
    for p in &cfg.calibrate.profiles {
        let safe = !p.name.is_empty() && p.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
        if !safe || !seen.insert(&p.name) {
            return Err(CliError::Config(format!("profile name `{}` must be unique and [A-Za-z0-9_-]+", p.name)));
        }
    }
    info!(profiles = cfg.calibrate.profiles.len(), samples = cfg.calibrate.samples, "calibrating");
    let reports = pool.install(|| {
        cfg.calibrate.profiles.par_iter().map(|p| evaluate(cfg, p)).collect::<CliResult<Vec<_>>>()
    })?;
    write_reports(out_dir, &reports)
}

/// Re-renders CSV tables from the stored per-profile JSON.
pub fn rerender(run_dir: &Path, out_dir: &Path, manifest: &RunManifest) -> CliResult<Vec<PathBuf>> {
    let reports = manifest
        .config
        .calibrate
        .profiles
        .iter()
        .map(|p| read_json(&run_dir.join("calibration").join(format!("{}.json", p.name))))
        .collect::<CliResult<Vec<ProfileReport>>>()?;
    write_reports(out_dir, &reports)
}

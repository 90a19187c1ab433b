//! Report documents: per-cell summary rows, the run manifest, and the
//! `report` subcommand that re-renders summaries from stored traces.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stepcascade_core::config::RunConfig;
use stepcascade_core::metrics::{cascade_rate, speedup_estimate, CostLedger, CostModel};
use stepcascade_core::trace::ReasoningTrace;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// One trace as stored in a cell's JSONL file. `correct` is absent when no
/// ground truth exists (live endpoints).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub trace: ReasoningTrace,
}

/// Aggregate over every trace of one (γ, k, W) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub gamma: String,
    pub draft_steps: usize,
    pub tree_width: usize,
    pub traces: u64,
    pub correct: Option<u64>,
    pub accuracy: Option<f64>,
    pub iterations: u64,
    pub steps: u64,
    pub cascade_rate: Option<f64>,
    pub acceptance_rate: Option<f64>,
    pub accepted_per_iteration: Option<f64>,
    pub draft_verify_calls: u64,
    pub target_verify_calls: u64,
    pub fallbacks: u64,
    pub layers: u64,
    pub draft_verify_calls_per_layer: Option<f64>,
    pub budget_exhausted: u64,
    pub run_cost: f64,
    pub baseline_cost: f64,
    pub speedup: Option<f64>,
}

impl SummaryRow {
    pub fn from_traces(cell: &RunConfig, records: &[TraceRecord], cost: &CostModel) -> Self {
        let mut ledger = CostLedger::default();
        let (mut iterations, mut steps, mut layers, mut exhausted) = (0u64, 0u64, 0u64, 0u64);
        let mut correct = Some(0u64);
        for r in records {
            ledger.merge(&r.trace.ledger);
            iterations += r.trace.iterations.len() as u64;
            steps += r.trace.steps().len() as u64;
            layers += r.trace.iterations.iter().map(|it| it.layers.len() as u64).sum::<u64>();
            exhausted += r.trace.budget_exhausted() as u64;
            correct = match (correct, r.correct) {
                (Some(n), Some(c)) => Some(n + c as u64),
                _ => None,
            };
        }
        let n = records.len() as u64;
        let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
        Self {
            gamma: cell.gamma.to_string(),
            draft_steps: cell.draft_steps,
            tree_width: cell.tree_width,
            traces: n,
            correct,
            accuracy: correct.and_then(|c| ratio(c, n)),
            iterations,
            steps,
            cascade_rate: cascade_rate(&ledger).ok(),
            acceptance_rate: ledger.acceptance_rate(),
            accepted_per_iteration: ratio(ledger.steps_accepted, iterations),
            draft_verify_calls: ledger.draft_verify_calls,
            target_verify_calls: ledger.target_verify_calls,
            fallbacks: ledger.fallbacks,
            layers,
            draft_verify_calls_per_layer: ratio(ledger.draft_verify_calls, layers),
            budget_exhausted: exhausted,
            run_cost: cost.run_cost(&ledger),
            baseline_cost: cost.target_only_cost(&ledger),
            speedup: speedup_estimate(&ledger, cost).ok(),
        }
    }
}

/// File-name-safe label of a sweep cell.
pub fn cell_label(cell: &RunConfig) -> String {
    format!("g{}_k{}_w{}", cell.gamma, cell.draft_steps, cell.tree_width)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryDoc {
    pub schema_version: u32,
    pub command: String,
    pub run_id: String,
    pub config: ExperimentConfig,
    pub rows: Vec<SummaryRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub command: String,
    pub tool_version: String,
    pub config: ExperimentConfig,
    pub started_at: String,
    pub finished_at: String,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<PathBuf>,
}

/// SHA-256 over the command name and the canonical JSON config snapshot.
pub fn run_id(command: &str, config: &ExperimentConfig) -> String {
    let snapshot = serde_json::to_vec(config).expect("config serializes");
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(&snapshot);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    Ok(serde_json::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(path: &Path, records: &[TraceRecord]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> CliResult<Vec<TraceRecord>> {
    let file = File::open(path).map_err(|e| anyhow::anyhow!("cannot open {}: {e}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), i + 1))?);
    }
    Ok(out)
}

/// Writes `summary.csv` and `summary.json` into `dir`.
pub fn write_summary(dir: &Path, doc: &SummaryDoc) -> CliResult<Vec<PathBuf>> {
    write_csv(&dir.join("summary.csv"), &doc.rows)?;
    write_json(&dir.join("summary.json"), doc)?;
    Ok(vec!["summary.csv".into(), "summary.json".into()])
}

/// Rebuilds the summary of a stored `simulate` or `bench` run from its
/// manifest and trace files, writing it into `out_dir`.
pub fn rerender(run_dir: &Path, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let manifest: RunManifest = read_json(&run_dir.join(MANIFEST_FILE))?;
    if manifest.schema_version != REPORT_SCHEMA_VERSION {
        return Err(CliError::Config(format!(
            "manifest schema version {} is not supported",
            manifest.schema_version
        )));
    }
    fs::create_dir_all(out_dir)?;
    match manifest.command.as_str() {
        "simulate" | "bench" => {
            let mut rows = Vec::new();
            for cell in manifest.config.cells() {
                let records = read_jsonl(&run_dir.join("traces").join(format!("{}.jsonl", cell_label(&cell))))?;
                rows.push(SummaryRow::from_traces(&cell, &records, &manifest.config.cost));
            }
            let doc = SummaryDoc {
                schema_version: REPORT_SCHEMA_VERSION,
                command: manifest.command.clone(),
                run_id: manifest.run_id.clone(),
                config: manifest.config.clone(),
                rows,
            };
            write_summary(out_dir, &doc)
        }
        "calibrate" => crate::calibrate::rerender(run_dir, out_dir, &manifest),
        other => Err(CliError::Config(format!("manifest names unknown command `{other}`"))),
    }
}

//! Live runs against two completions endpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stepcascade_core::backend::{RemoteClient, RemoteGenerator, RemoteVerifier};
use stepcascade_core::cascade::{CascadeEngine, ModelRole};
use stepcascade_core::metrics::cascade_rate;
use stepcascade_core::oracle::Tier;
use tracing::info;

use crate::config::{BenchSettings, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::report::{cell_label, write_csv, write_jsonl, write_summary, SummaryDoc, SummaryRow, TraceRecord, REPORT_SCHEMA_VERSION};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRow {
    pub cell: String,
    pub prompt: u64,
    pub steps: usize,
    pub iterations: usize,
    pub steps_accepted: u64,
    pub fallbacks: u64,
    pub draft_verify_calls: u64,
    pub target_verify_calls: u64,
    pub cascade_rate: Option<f64>,
    pub termination: String,
    pub wall_ms: f64,
}

pub fn load_prompts(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("at `bench.prompts`: cannot read {}: {e}", path.display())))?;
    let prompts: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_owned).collect();
    if prompts.is_empty() {
        return Err(CliError::Config(format!("at `bench.prompts`: {} has no prompts", path.display())));
    }
    Ok(prompts)
}

fn connect(role: &str, settings: &BenchSettings) -> CliResult<Arc<RemoteClient>> {
    let cfg = if role == "draft" { &settings.draft } else { &settings.target };
    let client = RemoteClient::new(cfg.clone())?;
    client.probe().map_err(|e| CliError::Backend(format!("{role} endpoint {} failed its probe: {e}", cfg.base_url)))?;
    Ok(Arc::new(client))
}

pub fn run(cfg: &ExperimentConfig, out_dir: &Path, pool: &rayon::ThreadPool, run_id: &str) -> CliResult<Vec<PathBuf>> {
    let settings = cfg
        .bench
        .as_ref()
        .ok_or_else(|| CliError::Config("at `bench`: section is required for the bench command".into()))?;
    let prompts = load_prompts(&settings.prompts)?;
    let draft = connect("draft", settings)?;
    let target = connect("target", settings)?;
    let delim = cfg.run.delimiter.clone();
    let draft_gen = RemoteGenerator::new(draft.clone(), delim.clone());
    let target_gen = RemoteGenerator::new(target.clone(), delim);
    let draft_ver = RemoteVerifier::new(draft, settings.template.clone(), Tier::Draft);
    let target_ver = RemoteVerifier::new(target, settings.template.clone(), Tier::Target);

    fs::create_dir_all(out_dir.join("traces"))?;
    let mut outputs = Vec::new();
    let (mut rows, mut trace_rows) = (Vec::new(), Vec::new());
    for cell in cfg.cells() {
        let label = cell_label(&cell);
        info!(cell = %label, prompts = prompts.len(), "benchmarking");
        let engine = CascadeEngine::new(
            cell.clone(),
            ModelRole::new(&draft_gen, &draft_ver),
            ModelRole::new(&target_gen, &target_ver),
        )?;
        let timed = pool.install(|| {
            prompts
                .par_iter()
                .enumerate()
                .map(|(i, p)| {
                    let start = Instant::now();
                    let trace = engine.run_trace(p)?;
                    Ok((TraceRecord { index: i as u64, correct: None, trace }, start.elapsed()))
                })
                .collect::<CliResult<Vec<_>>>()
        })?;
        let mut records = Vec::with_capacity(timed.len());
        for (r, wall) in timed {
            let l = &r.trace.ledger;
            trace_rows.push(TraceRow {
                cell: label.clone(),
                prompt: r.index,
                steps: r.trace.steps().len(),
                iterations: r.trace.iterations.len(),
                steps_accepted: l.steps_accepted,
                fallbacks: l.fallbacks,
                draft_verify_calls: l.draft_verify_calls,
                target_verify_calls: l.target_verify_calls,
                cascade_rate: cascade_rate(l).ok(),
                termination: r.trace.termination.as_str().to_owned(),
                wall_ms: wall.as_secs_f64() * 1e3,
            });
            records.push(r);
        }
        let rel = PathBuf::from("traces").join(format!("{label}.jsonl"));
        write_jsonl(&out_dir.join(&rel), &records)?;
        outputs.push(rel);
        rows.push(SummaryRow::from_traces(&cell, &records, &cfg.cost));
    }
    write_csv(&out_dir.join("per_trace.csv"), &trace_rows)?;
    outputs.push("per_trace.csv".into());
    let doc = SummaryDoc {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "bench".into(),
        run_id: run_id.to_owned(),
        config: cfg.clone(),
        rows,
    };
    outputs.extend(write_summary(out_dir, &doc)?);
    Ok(outputs)
}

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use stepcascade_core::simworld::SimWorld;
use tracing::info;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{cell_label, write_jsonl, write_summary, SummaryDoc, SummaryRow, TraceRecord, REPORT_SCHEMA_VERSION};

/// Runs every sweep cell over the configured simulated tasks and writes
/// per-cell trace files plus the summary.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, pool: &rayon::ThreadPool, run_id: &str) -> CliResult<Vec<PathBuf>> {
    let world = SimWorld::new(cfg.world.clone()).map_err(CliError::config)?;
    let opts = cfg.sim.run_options();
    let tasks = cfg.sim.first_task..cfg.sim.first_task + cfg.sim.traces;
    fs::create_dir_all(out_dir.join("traces"))?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for cell in cfg.cells() {
        let label = cell_label(&cell);
        info!(cell = %label, traces = cfg.sim.traces, "simulating");
        let records = pool.install(|| {
            tasks
                .clone()
                .into_par_iter()
                .map(|task| {
                    world.run_trace(task, &cell, &opts).map(|r| TraceRecord {
                        index: r.task,
                        correct: Some(r.correct),
                        trace: r.trace,
                    })
                })
                .collect::<Result<Vec<_>, _>>()
        })?;
        let rel = PathBuf::from("traces").join(format!("{label}.jsonl"));
        write_jsonl(&out_dir.join(&rel), &records)?;
        outputs.push(rel);
        rows.push(SummaryRow::from_traces(&cell, &records, &cfg.cost));
    }
    let doc = SummaryDoc {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "simulate".into(),
        run_id: run_id.to_owned(),
        config: cfg.clone(),
        rows,
    };
    outputs.extend(write_summary(out_dir, &doc)?);
    Ok(outputs)
}

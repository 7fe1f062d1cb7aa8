use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{evaluate, Stage, StepReport, Trainer};
use crate::config::RunConfig;
use crate::content_transfer::TransferPolicy;
use crate::datamodel::ClassCatalog;
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::networks::Networks;

pub const LOG_FILE: &str = "log.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_SNAPSHOT_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub history: Vec<MetricsEntry>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// One JSON object per loss term per step.
pub fn write_log_lines(out: &mut impl Write, report: &StepReport) -> Result<()> {
    let stage = match report.stage {
        Stage::Adapt => "adapt",
        Stage::Transfer => "transfer",
    };
    for (term, value) in report.log_entries() {
        let line = serde_json::json!({
            "step": report.step,
            "stage": stage,
            "term": term,
            "value": value,
        });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Trains both stages from a run configuration and writes the log, a
/// checkpoint, a config snapshot and the evaluation history under `out_dir`.
pub fn run_training(config: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate()?;
    let catalog = ClassCatalog::toy();
    let data = config.data.load(&catalog)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(CONFIG_SNAPSHOT_FILE), config.to_toml_string()?)?;

    let nets = Networks::new(config.networks.clone(), config.trainer.seed)?;
    let mut trainer = Trainer::new(
        nets,
        config.trainer.clone(),
        config.losses.clone(),
        Arc::new(data.train),
        catalog.clone(),
        TransferPolicy::toy(0),
    )?;
    let log_path = out_dir.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut history = Vec::new();
    let mut record = |trainer: &Trainer| -> Result<()> {
        if data.eval.is_empty() {
            return Ok(());
        }
        let cm = evaluate(&trainer.nets, &data.eval)?;
        let report = EvalReport::from_matrix(&cm, catalog.names(), catalog.tail_set());
        log::info!(
            "step {}: target mIoU {:?}, tail mIoU {:?}",
            trainer.step_index(),
            report.miou,
            report.miou_tail
        );
        history.push(MetricsEntry {
            step: trainer.step_index(),
            report,
        });
        Ok(())
    };

    let stage1 = config.trainer.stage1_iters;
    trainer.run_until(stage1, |r| write_log_lines(&mut log, r))?;
    if stage1 > 0 && config.trainer.stage2_iters > 0 {
        record(&trainer)?;
    }
    trainer.run(|r| write_log_lines(&mut log, r))?;
    record(&trainer)?;
    log.flush()?;

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let extra = serde_json::json!({
        "steps": trainer.step_index(),
        "trainer": config.trainer,
    });
    trainer.nets.save_checkpoint(&checkpoint, extra)?;
    let summary = RunSummary {
        steps: trainer.step_index(),
        history,
        checkpoint,
        log: log_path,
    };
    std::fs::write(
        out_dir.join(METRICS_FILE),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

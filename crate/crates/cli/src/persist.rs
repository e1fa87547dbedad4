use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use meltr::bilevel::RunRecord;

use crate::config::RunConfig;
use crate::CliError;

pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PARTIALS_FILE: &str = "partials.csv";
pub const LOSS_RANGES_FILE: &str = "loss_ranges.csv";

#[derive(Serialize, Deserialize)]
struct RunDocument {
    config: Value,
    record: RunRecord,
    cos_to_exact: Option<f64>,
}

/// A run as stored on disk.
#[derive(Clone, Debug)]
pub struct StoredRun {
    pub config: RunConfig,
    pub record: RunRecord,
    pub cos_to_exact: Option<f64>,
}

#[derive(Serialize)]
struct PartialRow {
    epoch: usize,
    task_id: usize,
    mean_partial: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_partials(path: &Path, partials: &[Vec<f64>]) -> Result<(), CliError> {
    let rows: Vec<PartialRow> = partials
        .iter()
        .enumerate()
        .flat_map(|(epoch, row)| row.iter().enumerate().map(move |(task_id, &p)| PartialRow { epoch, task_id, mean_partial: p }))
        .collect();
    write_csv(path, &rows, &["epoch", "task_id", "mean_partial"])
}

pub fn write_loss_ranges(path: &Path, record: &RunRecord) -> Result<(), CliError> {
    write_csv(path, &record.loss_ranges, &["task_id", "min", "q1", "median", "q3", "max"])
}

/// Write the JSON document and companion CSVs into `dir`.
pub fn write_run(dir: &Path, run: &StoredRun) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let record = &run.record;
    write_csv(&dir.join(METRICS_FILE), &record.metrics, &["epoch", "train_pri", "val_pri", "reg", "wall_ms"])?;
    write_partials(&dir.join(PARTIALS_FILE), &record.partials)?;
    write_loss_ranges(&dir.join(LOSS_RANGES_FILE), record)?;
    let doc = RunDocument { config: run.config.to_value(), record: record.clone(), cos_to_exact: run.cos_to_exact };
    // the JSON goes last so its presence marks a complete run
    let tmp = dir.join(format!("{RUN_FILE}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&doc)?)?;
    fs::rename(tmp, dir.join(RUN_FILE))?;
    Ok(())
}

pub fn read_run(dir: &Path) -> Result<StoredRun, CliError> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Missing(format!("{}: {e}", path.display())))?;
    let doc: RunDocument = serde_json::from_str(&text)?;
    Ok(StoredRun { config: RunConfig::from_value(doc.config)?, record: doc.record, cos_to_exact: doc.cos_to_exact })
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(RUN_FILE).is_file()
}

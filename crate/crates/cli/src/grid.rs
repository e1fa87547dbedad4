use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use meltr::bilevel::{cosine_to_exact, train_loop, Method};
use meltr::loss::GAMMA_ABLATION_GRID;
use meltr::meltr_net::Variant;

use crate::config::RunConfig;
use crate::persist::{is_complete, read_run, write_csv, write_run, StoredRun};
use crate::CliError;

/// One point of an experiment grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub suite: String,
    pub scheme: Method,
    pub variant: Variant,
    pub gamma: f64,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        let variant = serde_json::to_value(self.variant).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
        let name = format!("{}__{}__{}__g{}__s{}", self.suite, self.scheme, variant, self.gamma, self.seed);
        name.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '-' }).collect()
    }

    fn config(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.suite = self.suite.clone();
        cfg.train.scheme = self.scheme;
        cfg.train.meltr.variant = self.variant;
        cfg.train.gamma = self.gamma;
        cfg.train.seed = self.seed;
        cfg.suite_seed = None;
        cfg
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub run: StoredRun,
    /// Loaded from disk instead of trained.
    pub reused: bool,
}

/// Cross product of grid axes sharing one base config.
#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub base: RunConfig,
    pub cells: Vec<Cell>,
    pub output_dir: PathBuf,
    pub jobs: usize,
    pub resume: bool,
}

pub fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

impl ExperimentPlan {
    pub fn grid(base: RunConfig, schemes: &[Method], variants: &[Variant], gammas: &[f64], seeds: &[u64], output_dir: &Path) -> Self {
        let mut cells = Vec::new();
        for &scheme in schemes {
            for &variant in variants {
                for &gamma in gammas {
                    for &seed in seeds {
                        cells.push(Cell { suite: base.suite.clone(), scheme, variant, gamma, seed });
                    }
                }
            }
        }
        Self { base, cells, output_dir: output_dir.to_path_buf(), jobs: default_jobs(), resume: false }
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.output_dir.join("cells").join(cell.dir_name())
    }

    fn run_cell(&self, cell: &Cell) -> Result<CellResult, CliError> {
        let dir = self.cell_dir(cell);
        if self.resume && is_complete(&dir) {
            return Ok(CellResult { cell: cell.clone(), run: read_run(&dir)?, reused: true });
        }
        let config = cell.config(&self.base);
        config.validate()?;
        let task = config.task()?;
        let record = train_loop(&config.train, &task)?;
        let cos_to_exact = cosine_to_exact(&record, &task)?;
        let run = StoredRun { config, record, cos_to_exact };
        write_run(&dir, &run)?;
        Ok(CellResult { cell: cell.clone(), run, reused: false })
    }

    /// Run every cell on `jobs` workers; results come back in grid order.
    pub fn execute(&self) -> Result<Vec<CellResult>, CliError> {
        std::fs::create_dir_all(&self.output_dir)?;
        let pool = rayon::ThreadPoolBuilder::new().num_threads(self.jobs.max(1)).build().map_err(|e| CliError::Config(e.to_string()))?;
        pool.install(|| self.cells.par_iter().map(|c| self.run_cell(c)).collect())
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

fn mean_epoch_ms(run: &StoredRun) -> f64 {
    let m = &run.record.metrics;
    if m.is_empty() {
        return f64::NAN;
    }
    m.iter().map(|e| e.wall_ms).sum::<f64>() / m.len() as f64
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareRow {
    pub scheme: String,
    pub seed: u64,
    /// Final held-out primary loss, or `diverged`.
    pub val_pri: String,
    pub ms_per_epoch: f64,
    pub cos_to_exact: Option<f64>,
}

pub fn compare_rows(results: &[CellResult]) -> Vec<CompareRow> {
    results
        .iter()
        .map(|r| CompareRow {
            scheme: r.cell.scheme.to_string(),
            seed: r.cell.seed,
            val_pri: if r.run.record.divergence.is_some() { "diverged".into() } else { r.run.record.final_val_pri().to_string() },
            ms_per_epoch: mean_epoch_ms(&r.run),
            cos_to_exact: r.run.cos_to_exact,
        })
        .collect()
}

pub fn write_compare(path: &Path, rows: &[CompareRow]) -> Result<(), CliError> {
    write_csv(path, rows, &["scheme", "seed", "val_pri", "ms_per_epoch", "cos_to_exact"])
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub val_pri: f64,
    pub reg_gap: f64,
}

pub fn gamma_rows(gammas: &[f64], results: &[CellResult]) -> Vec<GammaRow> {
    gammas
        .iter()
        .map(|&g| {
            let runs: Vec<&StoredRun> = results.iter().filter(|r| r.cell.gamma == g).map(|r| &r.run).collect();
            GammaRow {
                gamma: g,
                val_pri: median(&runs.iter().map(|r| r.record.final_val_pri()).collect::<Vec<_>>()),
                reg_gap: median(&runs.iter().map(|r| r.record.final_reg()).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn write_gamma(path: &Path, rows: &[GammaRow]) -> Result<(), CliError> {
    write_csv(path, rows, &["gamma", "val_pri", "reg_gap"])
}

pub fn default_gammas() -> Vec<f64> {
    GAMMA_ABLATION_GRID.to_vec()
}

#[derive(Clone, Debug, Serialize)]
pub struct ArchRow {
    pub variant: String,
    pub val_pri: f64,
    /// `ok`, `untrainable` or `diverged` (any seed).
    pub status: String,
}

pub fn arch_rows(variants: &[Variant], results: &[CellResult]) -> Vec<ArchRow> {
    variants
        .iter()
        .map(|&v| {
            let runs: Vec<&StoredRun> = results.iter().filter(|r| r.cell.variant == v).map(|r| &r.run).collect();
            let status = if runs.iter().any(|r| r.record.untrainable) {
                "untrainable"
            } else if runs.iter().any(|r| r.record.divergence.is_some()) {
                "diverged"
            } else {
                "ok"
            };
            ArchRow {
                variant: serde_json::to_value(v).ok().and_then(|x| x.as_str().map(String::from)).unwrap_or_default(),
                val_pri: median(&runs.iter().map(|r| r.record.final_val_pri()).collect::<Vec<_>>()),
                status: status.into(),
            }
        })
        .collect()
}

pub fn write_arch(path: &Path, rows: &[ArchRow]) -> Result<(), CliError> {
    write_csv(path, rows, &["variant", "val_pri", "status"])
}

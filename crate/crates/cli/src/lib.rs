//! Experiment harness: single runs, scheme comparisons, ablation grids,
//! combiner traces and the oracle suites, with JSON and CSV artifacts.

pub mod config;
pub mod grid;
pub mod persist;
pub mod trace;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    Missing(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("gradcheck failed")]
    GradcheckFailed,
    #[error(transparent)]
    Core(#[from] meltr::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for divergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => 2,
            _ => 1,
        }
    }
}

/// Comma-separated integers; `a..b` expands to the half-open range.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, CliError> {
    let bad = || CliError::Config(format!("cannot parse seed list {text:?}"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                seeds.extend(a..b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, CliError> {
    let items: Result<Vec<T>, _> = text.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::parse).collect();
    match items {
        Ok(v) if !v.is_empty() => Ok(v),
        _ => Err(CliError::Config(format!("cannot parse {what} list {text:?}"))),
    }
}

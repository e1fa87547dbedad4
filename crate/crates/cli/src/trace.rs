use std::path::{Path, PathBuf};

use meltr::loss::TaskRole;
use meltr::meltr_net::{max_mixed_difference, LossVector, Sweep, SweepPoint};

use crate::persist::{read_run, write_csv, write_loss_ranges, write_partials, LOSS_RANGES_FILE, PARTIALS_FILE};
use crate::CliError;

pub const SWEEPS_FILE: &str = "sweeps.csv";
pub const SURFACE_FILE: &str = "surface_2d.csv";
pub const SURFACE_STEPS: usize = 31;

#[derive(Clone, Debug)]
pub struct TraceSummary {
    pub out: PathBuf,
    pub surface_tasks: (usize, usize),
    pub max_mixed_difference: f64,
}

/// Task to pair with the primary on the 2-D surface: the first harmful
/// task, else the auxiliary task with the smallest final partial.
fn most_harmful(roles: &[TaskRole], last_partials: Option<&Vec<f64>>) -> usize {
    if let Some(t) = roles.iter().position(|r| *r == TaskRole::Harmful) {
        return t;
    }
    last_partials
        .and_then(|p| (1..p.len()).min_by(|&a, &b| p[a].total_cmp(&p[b])))
        .unwrap_or(1)
}

/// Emit loss sweeps, the 2-D surface, per-epoch partials and loss ranges
/// for the run stored in `run_dir`.
pub fn cmd_trace(run_dir: &Path, out: Option<&Path>) -> Result<TraceSummary, CliError> {
    let run = read_run(run_dir)?;
    let record = &run.record;
    let net = record.meltr.as_ref().ok_or_else(|| CliError::Missing(format!("{}: no combiner snapshot", run_dir.display())))?;
    let n = net.config().n_tasks;
    if n < 2 {
        return Err(CliError::Missing("trace needs at least two tasks".into()));
    }
    let baseline = if record.final_losses.len() == n { record.final_losses.clone() } else { vec![1.0; n] };
    let baseline = LossVector::new(baseline)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("trace"));
    std::fs::create_dir_all(&out)?;

    let mut sweeps: Vec<SweepPoint> = Vec::new();
    for t in 0..n {
        sweeps.extend(net.sweep_surface(&Sweep::default_for(t), &baseline)?);
    }
    write_csv(&out.join(SWEEPS_FILE), &sweeps, &["task_id", "loss_value", "meltr_output", "partial"])?;

    let other = most_harmful(&record.suite.roles, record.partials.last());
    let range = (Sweep::default_for(0).lo, Sweep::default_for(0).hi);
    let surface = net.surface_2d(0, other, range, SURFACE_STEPS, &baseline)?;
    write_csv(&out.join(SURFACE_FILE), &surface, &["loss_a", "loss_b", "meltr_output"])?;

    write_partials(&out.join(PARTIALS_FILE), &record.partials)?;
    write_loss_ranges(&out.join(LOSS_RANGES_FILE), record)?;
    Ok(TraceSummary { out, surface_tasks: (0, other), max_mixed_difference: max_mixed_difference(&surface, SURFACE_STEPS) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmful_role_wins_over_partials() {
        let roles = [TaskRole::Primary, TaskRole::Helpful, TaskRole::Harmful];
        assert_eq!(most_harmful(&roles, Some(&vec![1.0, 0.1, 2.0])), 2);
        let roles = [TaskRole::Primary, TaskRole::Helpful, TaskRole::Neutral];
        assert_eq!(most_harmful(&roles, Some(&vec![0.0, 2.0, 0.5])), 2);
        assert_eq!(most_harmful(&roles, None), 1);
    }
}

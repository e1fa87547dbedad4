use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meltr::autodiff::{inject_fault, Fault};
use meltr::bilevel::{Method, TrainConfig};
use meltr::gradcheck::{run_gradcheck, GradcheckPlan};
use meltr::meltr_net::Variant;
use meltr_cli::config::RunConfig;
use meltr_cli::grid::{self, ExperimentPlan};
use meltr_cli::persist::{write_run, StoredRun};
use meltr_cli::trace::cmd_trace;
use meltr_cli::{parse_list, parse_seeds, CliError};

#[derive(Parser)]
#[command(name = "meltr", version, about = "Learned loss combination with bi-level hypergradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GridArgs {
    /// Base run config; grid axes override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    suite: Option<String>,
    #[arg(long, default_value = "0..5")]
    seeds: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip cells that already have a complete run directory.
    #[arg(long)]
    resume: bool,
    /// Worker threads (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one config and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare hypergradient schemes (and fixed combiners) across seeds.
    Compare {
        #[arg(long)]
        schemes: String,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Sweep the regularization strength.
    AblateGamma {
        #[arg(long)]
        gammas: Option<String>,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Compare combiner architectures.
    AblateArch {
        #[arg(long, default_value = "full,linear,se_only,te_only")]
        variants: String,
        #[command(flatten)]
        grid: GridArgs,
    },
    /// Loss sweeps, 2-D surface, partials and loss ranges of a finished run.
    Trace {
        run_dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Autodiff, hvp and hypergradient oracle suites.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, CliError> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| CliError::Config(format!("unknown variant {s:?}")))
}

fn base_config(args: &GridArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::new("regression", TrainConfig::default()),
    };
    if let Some(s) = &args.suite {
        cfg.suite = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn plan(args: &GridArgs, schemes: &[Method], variants: &[Variant], gammas: &[f64], default_out: &str) -> Result<ExperimentPlan, CliError> {
    let base = base_config(args)?;
    let seeds = parse_seeds(&args.seeds)?;
    let schemes = if schemes.is_empty() { vec![base.train.scheme] } else { schemes.to_vec() };
    let variants = if variants.is_empty() { vec![base.train.meltr.variant] } else { variants.to_vec() };
    let gammas = if gammas.is_empty() { vec![base.train.gamma] } else { gammas.to_vec() };
    let out = args.out.clone().unwrap_or_else(|| Path::new("runs").join(default_out));
    let mut plan = ExperimentPlan::grid(base, &schemes, &variants, &gammas, &seeds, &out);
    plan.resume = args.resume;
    if let Some(j) = args.jobs {
        plan.jobs = j;
    }
    Ok(plan)
}

fn report(plan: &ExperimentPlan, results: &[grid::CellResult]) {
    let reused = results.iter().filter(|r| r.reused).count();
    eprintln!("{} cells ({} trained, {} reused) in {}", results.len(), results.len() - reused, reused, plan.output_dir.display());
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let task = cfg.task()?;
            let record = meltr::bilevel::train_loop(&cfg.train, &task)?;
            let cos_to_exact = meltr::bilevel::cosine_to_exact(&record, &task)?;
            let dir = out.unwrap_or_else(|| {
                Path::new("runs").join(format!("{}_{}_s{}", cfg.suite, cfg.train.scheme, cfg.train.seed).replace(':', "-"))
            });
            let diverged = record.divergence.clone();
            write_run(&dir, &StoredRun { config: cfg, record, cos_to_exact })?;
            println!("{}", dir.display());
            if let Some(d) = diverged {
                return Err(CliError::Diverged(format!("epoch {}: {}", d.epoch, d.detail)));
            }
        }
        Command::Compare { schemes, grid: args } => {
            let schemes: Vec<Method> = parse_list(&schemes, "scheme")?;
            if schemes.len() < 2 {
                return Err(CliError::Config("compare needs at least two schemes".into()));
            }
            let plan = plan(&args, &schemes, &[], &[], "compare")?;
            let results = plan.execute()?;
            let path = plan.output_dir.join("comparison.csv");
            grid::write_compare(&path, &grid::compare_rows(&results))?;
            report(&plan, &results);
            println!("{}", path.display());
        }
        Command::AblateGamma { gammas, grid: args } => {
            let gammas: Vec<f64> = match gammas {
                Some(g) => parse_list(&g, "gamma")?,
                None => grid::default_gammas(),
            };
            let plan = plan(&args, &[], &[], &gammas, "ablate_gamma")?;
            let results = plan.execute()?;
            let path = plan.output_dir.join("gamma.csv");
            grid::write_gamma(&path, &grid::gamma_rows(&gammas, &results))?;
            report(&plan, &results);
            println!("{}", path.display());
        }
        Command::AblateArch { variants, grid: args } => {
            let variants = variants.split(',').map(|v| parse_variant(v.trim())).collect::<Result<Vec<_>, _>>()?;
            let plan = plan(&args, &[], &variants, &[], "ablate_arch")?;
            let results = plan.execute()?;
            let path = plan.output_dir.join("arch.csv");
            grid::write_arch(&path, &grid::arch_rows(&variants, &results))?;
            report(&plan, &results);
            println!("{}", path.display());
        }
        Command::Trace { run_dir, out } => {
            let summary = cmd_trace(&run_dir, out.as_deref())?;
            eprintln!(
                "surface over tasks {:?}: max mixed second difference {:.3e}",
                summary.surface_tasks, summary.max_mixed_difference
            );
            println!("{}", summary.out.display());
        }
        Command::Gradcheck { seed, inject_fault: fault } => {
            match fault.as_deref() {
                None => {}
                Some("exp-sign") => inject_fault(Fault::FlipExpSign),
                Some(other) => return Err(CliError::Config(format!("unknown fault {other:?}"))),
            }
            let report = run_gradcheck(&GradcheckPlan { seed, ..GradcheckPlan::default() });
            println!("{report}");
            if !report.passed() {
                return Err(CliError::GradcheckFailed);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

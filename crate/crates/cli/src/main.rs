use std::path::PathBuf;
use std::process::ExitCode;

use binmask::experiment::{ArmSummary, Summary};
use binmask::{run_experiment, run_gradcheck, Error, ExperimentConfig, GradcheckConfig, Task};
use clap::{Args, Parser, Subcommand};

/// Train sparse networks, select features and compare regularizers.
#[derive(Parser)]
#[command(name = "binmask", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with per-weight binary masks and report sparsity and accuracy.
    Sparsify(RunArgs),
    /// Select input features by penalty or by exact count.
    SelectFeatures(RunArgs),
    /// Compare BinMask against L1, L2, dropout and no regularization.
    RegularizeCompare(RunArgs),
    /// Check backprop against finite differences on random networks.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Concurrent trials; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: RunArgs, task: Task) -> Result<Summary, Error> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    match cfg.task {
        Some(t) if t != task => {
            return Err(Error::Config(format!(
                "task: file says `{}` but the command runs `{}`",
                t.name(),
                task.name()
            )))
        }
        _ => cfg.task = Some(task),
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("out: no output directory (pass --out or set `out`)".into()))?;
    let summary = run_experiment(&cfg, &out, args.jobs)?;
    println!("wrote {}", out.display());
    Ok(summary)
}

fn fmt_agg(a: &binmask::TrialAggregate) -> String {
    match a.ci95_halfwidth {
        Some(h) => format!("{:.4} ± {:.4}", a.mean, h),
        None => format!("{:.4}", a.mean),
    }
}

fn print_summary(s: &Summary) {
    for a in &s.aggregates {
        println!("{:<26}{}", a.metric, fmt_agg(a));
    }
    for ArmSummary { arm, aggregates } in &s.arms {
        let cols: Vec<String> = aggregates
            .iter()
            .filter(|a| matches!(a.metric.as_str(), "test_auc" | "val_auc" | "weight_l0"))
            .map(|a| format!("{} {}", a.metric, fmt_agg(a)))
            .collect();
        println!("{:<18}{}", arm.name, cols.join("  "));
    }
    for (method, arm) in &s.best_by_validation {
        println!("best {method}: {arm}");
    }
    for f in &s.failures {
        let arm = f.arm.as_deref().map(|a| format!(" ({a})")).unwrap_or_default();
        eprintln!("warning: trial {}{arm} failed: {}", f.trial, f.error);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let task = match &cli.command {
        Command::Sparsify(_) => Task::Sparsify,
        Command::SelectFeatures(_) => Task::SelectFeatures,
        Command::RegularizeCompare(_) => Task::RegularizeCompare,
        Command::Gradcheck(g) => {
            let res = g
                .config
                .as_ref()
                .map_or_else(|| Ok(GradcheckConfig::default()), GradcheckConfig::load)
                .and_then(|mut cfg| {
                    if let Some(seed) = g.seed {
                        cfg.seed = seed;
                    }
                    run_gradcheck(&cfg, g.out.as_deref(), g.jobs)
                });
            return match res {
                Ok(r) => {
                    let failed = r.cases.iter().filter(|c| !c.passed()).count();
                    println!("{} networks, {failed} failed, max relative error {:.3e}", r.cases.len(), r.max_rel_err);
                    if r.passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::FAILURE
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(2)
                }
            };
        }
    };
    let args = match cli.command {
        Command::Sparsify(a) | Command::SelectFeatures(a) | Command::RegularizeCompare(a) => a,
        Command::Gradcheck(_) => unreachable!(),
    };
    match run(args, task) {
        Ok(s) => {
            print_summary(&s);
            if s.partial && s.aggregates.is_empty() && s.arms.is_empty() {
                eprintln!("error: every trial failed");
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

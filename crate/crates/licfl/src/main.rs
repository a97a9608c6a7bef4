use clap::{Parser, Subcommand};
use licfl::experiment::{
    compare, comparison_csv, render_table, run_experiment, CohortExport, ExperimentConfig,
    RunOptions,
};
use std::path::PathBuf;
use std::process::ExitCode;

/// Federated-learning simulator with spectral client cohorting and adaptive
/// server aggregation.
#[derive(Parser)]
#[command(name = "licfl", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiments described by a JSON config file.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Validate the config and exit without running anything.
        #[arg(long)]
        dry_run: bool,
        /// Replace the config's seed list with a single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Output directory (defaults to the config's out_dir, then
        /// $LICFL_OUT_DIR, then ./licfl-runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare rounds.jsonl logs: final loss, convergence, selection counts.
    Compare {
        /// One or more rounds.jsonl files.
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        /// Global-MSE threshold for the rounds-to-threshold column.
        #[arg(long, default_value_t = 0.2)]
        mse_threshold: f64,
        /// Also write a per-client CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the cohort assignment stored in a cohorts.json file.
    CohortInspect { cohorts: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> licfl::Result<()> {
    match cli.command {
        Command::Run {
            config,
            dry_run,
            seed_override,
            out,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let opts = RunOptions {
                dry_run,
                seed_override,
                out_override: out,
            };
            let summary = run_experiment(&cfg, &opts)?;
            if dry_run {
                println!("config ok: {}", config.display());
                return Ok(());
            }
            println!("wrote {}", summary.out_dir.display());
            for r in &summary.results {
                println!(
                    "  {:<20} seed {:<6} final mse {:.6}",
                    r.mode, r.seed, r.final_mse
                );
            }
            Ok(())
        }
        Command::Compare {
            logs,
            mse_threshold,
            out,
        } => {
            let summaries = compare(&logs, mse_threshold)?;
            print!("{}", render_table(&summaries, mse_threshold));
            if let Some(path) = out {
                std::fs::write(&path, comparison_csv(&summaries))?;
                println!("per-client table written to {}", path.display());
            }
            Ok(())
        }
        Command::CohortInspect { cohorts } => {
            let text = std::fs::read_to_string(&cohorts)?;
            let export: CohortExport = serde_json::from_str(&text)?;
            println!("cohorting: {}", serde_json::to_string(&export.cohorting)?);
            println!("cohorts: {}", export.assignment.num_cohorts());
            for j in 0..export.assignment.num_cohorts() {
                let members = export.assignment.members(j);
                let ids: Vec<String> = members.iter().map(|m| m.to_string()).collect();
                println!(
                    "  cohort {j} ({} clients): {}",
                    members.len(),
                    ids.join(", ")
                );
            }
            Ok(())
        }
    }
}

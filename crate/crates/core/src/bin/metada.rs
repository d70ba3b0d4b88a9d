use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metada::harness::{
    aggregate_runs, load_slice_spec, run_experiment, slice_weight_space, ExperimentConfig,
    ProblemData, RunOptions,
};

#[derive(Parser)]
#[command(
    name = "metada",
    version,
    about = "Meta-learned initial conditions for domain adaptation"
)]
struct Cli {
    /// Maximum number of runs executed concurrently (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Added to every seed in the config
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Only print warnings and errors
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment grid and write reports plus summary.csv
    Run { config: PathBuf },
    /// Evaluate metrics on a plane through three parameter files
    Slice { spec: PathBuf },
    /// Recompute summary.csv and write comparison.csv from stored reports
    Aggregate { dir: PathBuf },
    /// Write the benchmark datasets of an experiment config as CSV
    Export { config: PathBuf, out_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn execute(cli: &Cli) -> metada::Result<ExitCode> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(config)?;
            let out = run_experiment(
                &cfg,
                &RunOptions {
                    seed_offset: cli.seed_offset,
                },
            )?;
            for r in &out.summary {
                println!(
                    "{:<14} {:<12} acc {:.4} +- {:.4} over {} seeds, {:.3e} s/iter, {} failed",
                    r.method,
                    r.meta_mode,
                    r.mean_acc,
                    r.std_acc,
                    r.n_seeds,
                    r.s_per_outer_iter,
                    r.n_failed
                );
            }
            let failed = out.n_failed();
            if failed > 0 {
                eprintln!(
                    "{failed} run(s) failed; see *.error.json in {}",
                    cfg.output_dir.join("reports").display()
                );
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Slice { spec } => {
            let spec = load_slice_spec(spec)?;
            let out = slice_weight_space(&spec)?;
            let mut ok = true;
            for c in &out.corners {
                ok &= c.exact();
                println!(
                    "corner {} ({}, {}): {}",
                    c.name,
                    c.a,
                    c.b,
                    if c.exact() { "exact" } else { "MISMATCH" }
                );
            }
            println!(
                "wrote {} grid points to {}",
                out.rows.len(),
                spec.output.display()
            );
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Aggregate { dir } => {
            let out = aggregate_runs(dir)?;
            for r in &out.comparisons {
                let s = &r.stats;
                println!(
                    "{} - {}: {:+.4} (95% CI [{:+.4}, {:+.4}]) over {} pairs, wins {}/{}/{}",
                    r.cell_a,
                    r.cell_b,
                    s.mean_diff,
                    s.ci95_low,
                    s.ci95_high,
                    s.n_pairs,
                    s.wins_a,
                    s.wins_b,
                    s.ties
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export { config, out_dir } => {
            let cfg = ExperimentConfig::load(config)?;
            let data = ProblemData::build(cfg.scenario, &cfg.benchmark)?;
            for f in data.export_csv(out_dir)? {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

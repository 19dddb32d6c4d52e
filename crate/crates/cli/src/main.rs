use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fdivlab::experiment::{self, ExperimentGrid, Summary};
use fdivlab::synth::{generate_task, write_split_csv};
use fdivlab::verify::{run_verify, Suite};
use fdivlab::Error;

#[derive(Parser)]
#[command(
    name = "fdivlab",
    version,
    about = "f-divergence weak-to-strong experiments and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a loss × noise × seed grid and write runs and summary tables.
    Run {
        /// TOML grid file; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Worker threads (0 = all cores).
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Replace the grid's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run property suites and write a JSON report.
    Verify {
        /// Comma-separated subset of divergence, gradients, pinsker, bound, equivalence.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        suites: Vec<String>,
        /// Random cases per kind for the pinsker and bound suites.
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Report path.
        #[arg(long, default_value = "verify-report.json")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Write the task's three splits as CSV, plus the labeling function.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "task")]
        out: PathBuf,
        /// Override the task seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-pivot an existing runs.csv into summary tables.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidInput(_) | Error::Toml(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Run(other.to_string()),
        }
    }
}

fn load_grid(config: Option<&Path>) -> Result<ExperimentGrid, Failure> {
    match config {
        Some(path) => Ok(ExperimentGrid::from_file(path).map_err(|e| match e {
            Error::Io(io) => Failure::Usage(format!("{}: {io}", path.display())),
            other => other.into(),
        })?),
        None => Ok(ExperimentGrid::default()),
    }
}

fn print_summary(summary: &Summary) {
    print!("{:<10}", "loss");
    for n in &summary.noise_levels {
        print!(" {:>8}", n);
    }
    println!();
    let cell = |v: &Option<f64>| v.map_or_else(|| format!("{:>8}", "-"), |x| format!("{x:>8.4}"));
    for row in &summary.rows {
        print!("{:<10}", row.loss.to_string());
        row.values.iter().for_each(|v| print!(" {}", cell(v)));
        println!();
    }
    print!("{:<10}", "weak");
    summary.weak.iter().for_each(|v| print!(" {}", cell(v)));
    println!();
}

fn execute(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Run {
            config,
            out,
            workers,
            seed,
        } => {
            let mut grid = load_grid(config.as_deref())?;
            if let Some(seed) = seed {
                grid.seeds = vec![seed];
            }
            let outcome = experiment::run_grid(&grid, &out, workers)?;
            print_summary(&outcome.summary);
            for f in &outcome.failures {
                eprintln!(
                    "cell failed: loss {} noise {} seed {}: {}",
                    f.cell.loss, f.cell.noise_level, f.cell.seed, f.error
                );
            }
            let broken = outcome.rows.iter().filter(|r| !r.bound_holds).count();
            if broken > 0 {
                eprintln!("{broken} runs violate the limit inequality");
            }
            println!("wrote {} rows to {}", outcome.rows.len(), out.display());
            Ok(outcome.passed())
        }
        Command::Verify {
            suites,
            trials,
            seed,
            out,
            workers,
        } => {
            let suites = suites
                .iter()
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.parse::<Suite>())
                .collect::<Result<Vec<_>, _>>()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .map_err(|e| Failure::Run(e.to_string()))?;
            let report = pool.install(|| run_verify(&suites, trials, seed))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Failure::Run(e.to_string()))?;
            }
            let text =
                serde_json::to_string_pretty(&report).map_err(|e| Failure::Run(e.to_string()))?;
            std::fs::write(&out, text + "\n").map_err(|e| Failure::Run(e.to_string()))?;
            for suite in &report.suites {
                for check in &suite.checks {
                    println!(
                        "[{}] {}: {} (cases {}, worst {:e})",
                        if check.passed { "PASS" } else { "FAIL" },
                        suite.suite,
                        check.name,
                        check.cases,
                        check.worst
                    );
                }
            }
            println!("report written to {}", out.display());
            Ok(report.passed)
        }
        Command::Gen { config, out, seed } => {
            let mut task = load_grid(config.as_deref())?.task;
            if let Some(seed) = seed {
                task.seed = seed;
            }
            let (split, teacher) = generate_task(&task)?;
            write_split_csv(&out, &split)?;
            let text =
                serde_json::to_string_pretty(&teacher).map_err(|e| Failure::Run(e.to_string()))?;
            std::fs::write(out.join("teacher.json"), text + "\n")
                .map_err(|e| Failure::Run(e.to_string()))?;
            println!(
                "wrote 3 splits of {} samples to {}",
                task.samples_per_split,
                out.display()
            );
            Ok(true)
        }
        Command::Report { runs, out } => {
            let summary = experiment::report(&runs, &out)?;
            print_summary(&summary);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

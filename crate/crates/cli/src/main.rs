//! semfit command line: fit CFA models, run Monte Carlo plans, and render
//! aggregate tables and charts.

mod fit_cmd;
mod report_cmd;
mod simulate_cmd;
mod svg;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "semfit", version, about = "Confirmatory factor analysis: estimation, chi-square tests, fit indices, and Monte Carlo studies", disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to a data CSV and report statistics, indices, and LM candidates
    Fit {
        /// Model definition (JSON)
        #[arg(long)]
        model: PathBuf,
        /// Data CSV with a header of variable names
        #[arg(long)]
        data: PathBuf,
        /// Statistic to report: ml, rls, or sb (repeatable; default ml)
        #[arg(long = "estimator", value_name = "KIND")]
        estimators: Vec<String>,
        /// Also write a machine-readable report to this path
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
        /// Additionally print the conventional Tucker-Lewis variant
        #[arg(long)]
        conventional_tli: bool,
    },
    /// Run a Monte Carlo plan and write rows.csv / aggregate.csv
    Simulate {
        /// Plan file (JSON); mutually exclusive with the inline flags
        #[arg(long, conflicts_with_all = ["scenario", "sizes", "reps", "seed", "estimators", "lm"])]
        plan: Option<PathBuf>,
        /// Scenario: correct_normal, misspecified_normal,
        /// elliptical_normal_theory, or small_sample_rls
        #[arg(long)]
        scenario: Option<String>,
        /// Comma-separated sample sizes (default 60,...,5000)
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Replications per sample size (default 500)
        #[arg(long)]
        reps: Option<usize>,
        /// Master seed (default 42)
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated estimators: ml, rls, sb (default ml)
        #[arg(long, value_delimiter = ',')]
        estimators: Vec<String>,
        /// Also fit the variant with the top LM candidate freed
        #[arg(long)]
        lm: bool,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an aggregate CSV as an aligned table and an SVG line chart
    Report {
        /// Aggregate CSV produced by `simulate`
        #[arg(long)]
        aggregate: PathBuf,
        /// Output SVG path
        #[arg(long)]
        out: PathBuf,
        /// Panel selection: chisq, indices, or both
        #[arg(long, default_value = "both")]
        panel: String,
        /// Reference line for the chi-square panel
        #[arg(long, default_value_t = 87)]
        df: usize,
    },
}

/// Exit codes: 0 success, 1 input error, 2 statistical non-convergence.
fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };

    let outcome = match cli.command {
        Command::Fit {
            model,
            data,
            estimators,
            json,
            conventional_tli,
        } => fit_cmd::run(&model, &data, &estimators, json.as_deref(), conventional_tli),
        Command::Simulate {
            plan,
            scenario,
            sizes,
            reps,
            seed,
            estimators,
            lm,
            out,
        } => simulate_cmd::run(
            plan.as_deref(),
            scenario.as_deref(),
            &sizes,
            reps,
            seed,
            &estimators,
            lm,
            &out,
        ),
        Command::Report {
            aggregate,
            out,
            panel,
            df,
        } => report_cmd::run(&aggregate, &out, &panel, df),
    };

    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

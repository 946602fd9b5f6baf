use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lab_core::harness::{
    emit_plot_data, list_experiments, run_experiment, ExperimentConfig, ExperimentReport,
};

#[derive(Parser)]
#[command(
    name = "lab",
    version,
    about = "Run regularization-by-noise experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its rows.
    Run {
        id: String,
        /// JSON config file. Without one, only `seed` must come from --set.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config field, e.g. `--set grid.dt=0.001`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// List registered experiments.
    List,
    /// Write one series of a JSON report as two-column CSV to stdout.
    Plotdata { report: PathBuf, series: String },
}

fn run(id: String, config: Option<PathBuf>, mut overrides: Vec<String>) -> lab_core::Result<bool> {
    let text = match &config {
        Some(path) => std::fs::read_to_string(path)?,
        None => "{}".to_string(),
    };
    overrides.insert(0, format!("experiment=\"{id}\""));
    let cfg = ExperimentConfig::from_json(&text, &overrides)?;
    let report = run_experiment(&cfg)?;
    report.write_csv(std::io::stdout().lock())?;
    eprintln!(
        "{}: {} rows, {} in {:.1}s",
        report.experiment,
        report.rows.len(),
        if report.all_pass() { "PASS" } else { "FAIL" },
        report.wall_time_s
    );
    for path in &report.artifacts {
        eprintln!("wrote {path}");
    }
    Ok(report.all_pass())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            id,
            config,
            overrides,
        } => run(id, config, overrides),
        Command::List => {
            for e in list_experiments() {
                let criterion = e.criterion.map_or("-".to_string(), |c| c.to_string());
                println!("{:<22} {:>3}  {}", e.id, criterion, e.description);
            }
            Ok(true)
        }
        Command::Plotdata { report, series } => std::fs::read_to_string(&report)
            .map_err(Into::into)
            .and_then(|text| ExperimentReport::from_json(&text))
            .and_then(|r| emit_plot_data(&r, &series, std::io::stdout().lock()))
            .map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use pnr_cli::pipeline;
use pnr_cli::{CliError, Overrides, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "pnr",
    version,
    about = "Photon-number-resolving detector tomography pipeline"
)]
struct Cli {
    /// JSON config file; missing fields take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every probe and write shot containers plus manifest.json.
    Simulate,
    /// Build references and classify all shots into statistics.
    Classify,
    /// Reconstruct the POVM from the classified statistics.
    Tomography {
        /// Statistics file; defaults to stats.json in the output directory.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Summarise the outputs and draw the charts.
    Report,
    /// Run all stages in order.
    Full,
    /// Print the effective config as JSON.
    Config,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = PipelineConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let dir = cfg.output_dir.display().to_string();
    match cli.command {
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
        Command::Simulate => {
            let m = pipeline::simulate(&cfg).context("simulate")?;
            let records: u64 = m.probes.iter().map(|p| p.records).sum();
            println!("wrote {} containers ({records} records) to {dir}", m.probes.len());
        }
        Command::Classify => {
            let s = pipeline::classify(&cfg).context("classify")?;
            let shots: u64 = s.errors.iter().map(|e| e.shots).sum();
            println!("classified {shots} shots into {dir}/{}", pipeline::STATS_JSON);
        }
        Command::Tomography { stats } => {
            let t = pipeline::tomography(&cfg, stats.as_deref()).context("tomography")?;
            println!(
                "reconstructed {}x{} POVM in {} iterations, residual {:.3e}",
                t.truncation, t.outcomes, t.report.iterations_used, t.report.residual_norm
            );
        }
        Command::Report => {
            let r = pipeline::report(&cfg).context("report")?;
            print_summary(&r);
        }
        Command::Full => {
            let r = pipeline::full(&cfg).context("full pipeline")?;
            print_summary(&r);
        }
    }
    Ok(())
}

fn print_summary(r: &pipeline::Report) {
    println!(
        "efficiency: estimated {:.4}, configured {:.4}",
        r.estimated_efficiency, r.configured_efficiency
    );
    println!(
        "error rate: pattern {:.4}, single point {:.4}",
        r.pattern_error_rate, r.single_point_error_rate
    );
    println!(
        "max column TV vs binomial model at the estimate: {:.4}",
        r.max_column_tv_vs_estimated_model
    );
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}

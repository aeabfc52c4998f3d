//! Command-line experiment driver.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use agentserve_core::model::Granularity;
use agentserve_harness::config::ExperimentConfig;
use agentserve_harness::experiment::{compare_modes, compute_capacity, load_points, run_point};
use agentserve_harness::report::Report;

#[derive(Parser)]
#[command(name = "agentserve", about = "Load sweeps for a controller-driven agent-serving pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the config's random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for report.csv (and trace files with --trace).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the report CSV to stdout.
    #[arg(long, global = true)]
    csv: bool,
    /// Record and write per-run event traces.
    #[arg(long, global = true)]
    trace: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (load point, policy) combination and write report.csv.
    Run { config: PathBuf },
    /// Run the sweep and print the winning policy per load point.
    Compare { config: PathBuf },
    /// Print the analytic capacity bound for one communication mode.
    Capacity {
        config: PathBuf,
        #[arg(long)]
        mode: String,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_report(report: &Report, out: &Option<PathBuf>, csv: bool) -> Result<()> {
    let dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)?;
    let path = dir.join("report.csv");
    fs::write(&path, report.to_csv())?;
    eprintln!("wrote {}", path.display());
    if csv {
        print!("{}", report.to_csv());
    }
    Ok(())
}

fn sanitize(label: &str) -> String {
    label.replace([':', '(', ')', '/'], "_")
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { config } => {
            let cfg = load_config(config, cli.seed)?;
            let mut rows = Vec::new();
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
            for (factor, rate) in load_points(&cfg) {
                for policy in &cfg.policies {
                    let run = run_point(&cfg, policy, factor, rate, cli.trace);
                    eprintln!(
                        "load {:>6.3}/s policy {:<26} goodput {:>7.3}/s p90 {} transfers {}+{}h",
                        rate,
                        run.row.policy,
                        run.row.goodput_per_s,
                        run.row
                            .p90_e2e_ms
                            .map(|v| format!("{v:.1}ms"))
                            .unwrap_or_else(|| "-".into()),
                        run.outcome.admission_transfers,
                        run.outcome.hint_transfers,
                    );
                    if cli.trace {
                        fs::create_dir_all(&dir)?;
                        let name = format!(
                            "trace_{}_{}.csv",
                            factor.map(|f| f.to_string()).unwrap_or_else(|| rate.to_string()),
                            sanitize(&run.row.policy)
                        );
                        fs::write(dir.join(&name), run.outcome.trace.to_csv())?;
                    }
                    rows.push(run.row);
                }
            }
            write_report(&Report { rows }, &cli.out, cli.csv)?;
        }
        Command::Compare { config } => {
            let cfg = load_config(config, cli.seed)?;
            let (report, winners) = compare_modes(&cfg)?;
            for (rate, policy) in &winners {
                println!("winner at {rate:.3}/s: {policy}");
            }
            write_report(&report, &cli.out, cli.csv)?;
        }
        Command::Capacity { config, mode } => {
            let cfg = load_config(config, cli.seed)?;
            let mode = Granularity::parse(mode)
                .map_err(|e| anyhow::anyhow!("bad --mode: {e}"))?;
            let capacity = compute_capacity(&cfg, mode);
            println!("{capacity:.6}");
        }
    }
    Ok(())
}

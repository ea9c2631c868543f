use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use paramdrop::config::{Config, Policy};
use paramdrop::runner;
use paramdrop::Error;

#[derive(Parser)]
#[command(name = "paramdrop", version, about = "Simulate multi-instance LLM serving under memory pressure")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one simulation and write report.csv, events.log and timeline.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// kunserve, recompute, swap or migrate; overrides the config.
        #[arg(long)]
        policy: Option<String>,
    },
    /// Run every policy on the same trace and write a combined report.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load(config: &PathBuf, seed: Option<u64>, policy: Option<&str>) -> Result<Config, Error> {
    let mut cfg = Config::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(p) = policy {
        cfg.policy = p.parse()?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Run { config, out, seed, policy } => load(&config, seed, policy.as_deref()).map(|cfg| (cfg, out, None)),
        Cmd::Compare { config, out, seed } => load(&config, seed, None).map(|cfg| (cfg, out, Some(Policy::ALL))),
    };
    let (cfg, out, policies) = match result {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let rows = match policies {
        None => runner::run_config(&cfg).and_then(|o| runner::write_run(&out, &o)).map(|r| vec![r]),
        Some(ps) => runner::run_policies(&cfg, &ps).and_then(|o| runner::write_comparison(&out, &o)),
    };
    match rows {
        Ok(rows) => {
            for r in rows {
                println!(
                    "{:<10} completed={} ttft_p99={:.3}s tpot_p50={:.4}s evictions={} drops={}",
                    r.policy, r.completed, r.ttft.p99, r.tpot.p50, r.evictions, r.drop_events
                );
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

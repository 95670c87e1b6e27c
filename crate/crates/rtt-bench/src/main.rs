use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rtt_bench::rtconfig;
use rtt_bench::runner::{self, config, RunOptions};

#[derive(Parser)]
#[command(name = "rtt-bench", version, about = "Round-trip latency benchmark for best-effort pub/sub over UDP")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the client side (or loopback) experiments of a matrix file.
    Run {
        matrix: PathBuf,
        /// Run only this experiment id.
        #[arg(long)]
        only: Option<String>,
        /// Results root; overrides `output_dir` in the matrix.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Abort if any real-time setting is not applied.
        #[arg(long)]
        strict_rt: bool,
        /// Use each experiment's full-length duration.
        #[arg(long)]
        paper_durations: bool,
    },
    /// Serve the server side of a matrix's experiments to remote clients.
    Server {
        config: PathBuf,
        /// Listen address; defaults to the experiments' control port.
        #[arg(long)]
        listen: Option<SocketAddr>,
        #[arg(long)]
        strict_rt: bool,
        #[arg(long)]
        paper_durations: bool,
    },
    /// Render the tables for stored results.
    Report { dir: PathBuf },
    /// Show which real-time settings this process may apply.
    Probe,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Run { matrix, only, output, strict_rt, paper_durations } => {
            let mut m = config::load_matrix(&matrix)?;
            if let Some(id) = only {
                m = config::select(m, &id, &matrix)?;
            }
            let opts = RunOptions { output_dir: output, strict_rt, paper_durations, ..Default::default() };
            let results = runner::run_matrix(&m, &opts)?;
            if results.is_empty() {
                bail!("{}: no client or loopback experiments to run", matrix.display());
            }
            let summaries: Vec<_> = results.iter().map(|r| r.summary()).collect();
            print!("{}", runner::render_report(&summaries));
            for r in &results {
                log::info!("{}: results in {}", r.id, r.run_dir.display());
            }
        }
        Cmd::Server { config: path, listen, strict_rt, paper_durations } => {
            let m = config::load_matrix(&path)?;
            let listen = match listen {
                Some(a) => a,
                None => runner::control_address(&m)?,
            };
            let opts = RunOptions { strict_rt, paper_durations, ..Default::default() };
            let stop = AtomicBool::new(false);
            runner::serve(&m, listen, &opts, &stop)?;
        }
        Cmd::Report { dir } => {
            let summaries = runner::load_summaries(&dir).with_context(|| format!("reading {}", dir.display()))?;
            if summaries.is_empty() {
                bail!("no result.meta under {}", dir.display());
            }
            print!("{}", runner::render_report(&summaries));
        }
        Cmd::Probe => println!("{}", rtconfig::probe()),
    }
    Ok(())
}

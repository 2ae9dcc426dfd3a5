//! Reference external score model: serves the analytic score of a config's `rho`
//! over the line protocol on stdin/stdout.
//!
//! Usage: `reference-score-server --config run.toml`

use std::io::{self, BufWriter};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use diffsens::harness::config::RunConfig;
use diffsens::measures::DiffusedMeasure;
use diffsens::score_source::{serve, ScoreSource};

#[derive(Parser)]
#[command(version, about = "Serve the analytic score of a run configuration's target")]
struct Args {
    #[arg(long, short)]
    config: PathBuf,
}

fn run(args: Args) -> diffsens::Result<()> {
    let cfg = RunConfig::load(&args.config)?;
    let dt = cfg
        .sweep
        .dt
        .iter()
        .chain([&cfg.sweep.hutchinson_dt, &cfg.correlation.dt])
        .copied()
        .fold(f64::INFINITY, f64::min);
    let sched = cfg.schedule.build(dt)?;
    let src = ScoreSource::Analytic(DiffusedMeasure::new(cfg.rho.build()?, sched));
    let stdin = io::stdin().lock();
    let stdout = BufWriter::new(io::stdout().lock());
    serve(&src, stdin, stdout)
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("reference-score-server: {e}");
            ExitCode::from(diffsens::harness::cli::exit_code(&e) as u8)
        }
    }
}

//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for configuration and usage errors (including
//! bad arguments), 3 for numerical or backend failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::config::{Overrides, RunConfig};
use super::experiments::{
    run_correlation_experiment, run_hutchinson_sweep, run_ot_baseline, run_remainder_sweep, run_sample,
    run_sensitivity, with_workers,
};
use super::report::Report;
use crate::artifact::{write_sample_path, write_sensitivity_path};
use crate::dynamics::{PathKind, Storage};
use crate::error::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "diffsens", version, about = "Sample sensitivity of diffusion models to target perturbations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Median scaled Taylor remainder over samplers, step sizes and mixture weights.
    RemainderSweep(Common),
    /// Remainder curves with Hutchinson densities for each probe count.
    HutchinsonSweep(Common),
    /// Per-sample correlations (prediction or backend mode).
    Correlate(Common),
    /// Sample the configured backend and optionally store the path.
    Sample(PathArgs),
    /// Sample and integrate the sensitivity equation; optionally store both paths.
    Sensitivity(PathArgs),
    /// Entropic OT rays from model samples to the configured targets.
    OtBaseline(OtArgs),
    /// Parse and validate a configuration, then print its hash.
    ValidateConfig(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Step sizes (comma separated).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    dt: Option<Vec<f64>>,
    /// Mixture weights η̄ (comma separated).
    #[arg(long = "eta", value_delimiter = ',', num_args = 1..)]
    eta: Option<Vec<f64>>,
    /// Use the `[full]` dimension and batch size.
    #[arg(long)]
    full: bool,
    /// Worker threads (0: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SamplerArg {
    Ode,
    Sde,
}

impl From<SamplerArg> for PathKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Ode => PathKind::Ode,
            SamplerArg::Sde => PathKind::Sde,
        }
    }
}

#[derive(Debug, Args)]
struct PathArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "ode")]
    sampler: SamplerArg,
    /// States to store: `full`, `endpoints`, or a stride `k`. Nothing is written when absent.
    #[arg(long, value_parser = parse_storage)]
    store: Option<Storage>,
}

#[derive(Debug, Args)]
struct OtArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "ode")]
    sampler: SamplerArg,
}

fn parse_storage(s: &str) -> std::result::Result<Storage, String> {
    match s {
        "full" => Ok(Storage::Full),
        "endpoints" => Ok(Storage::Endpoints),
        k => match k.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(Storage::Strided(k)),
            _ => Err(format!("expected full, endpoints or a positive stride, got {s:?}")),
        },
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Io(_) => EXIT_CONFIG,
        Error::Domain(_) | Error::Construction(_) | Error::Transport { .. } | Error::Integration { .. } => {
            EXIT_NUMERICAL
        }
    }
}

fn single(values: &Option<Vec<f64>>, flag: &str) -> Result<Option<f64>> {
    match values.as_deref() {
        None => Ok(None),
        Some([v]) => Ok(Some(*v)),
        Some(_) => Err(Error::Usage(format!("this command takes a single {flag} value"))),
    }
}

/// Resolved configuration. Commands with a single step size or weight take
/// `--dt`/`--eta` as that value.
fn load(c: &Common, scalar_dt: Option<fn(&mut RunConfig, f64)>, scalar_eta: bool) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?.apply(&Overrides {
        dt: if scalar_dt.is_some() { None } else { c.dt.clone() },
        eta_bar: if scalar_eta { None } else { c.eta.clone() },
        seed: c.seed,
        batch_size: c.batch_size,
        workers: c.workers,
        output_dir: c.output.clone(),
        full: c.full,
    })?;
    if let Some(set) = scalar_dt {
        if let Some(dt) = single(&c.dt, "--dt")? {
            set(&mut cfg, dt);
        }
    }
    if scalar_eta {
        if let Some(eta) = single(&c.eta, "--eta")? {
            cfg.correlation.eta_bar = eta;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_artifact(dir: &Path, name: &str, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(File::create(dir.join(name))?);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

fn finish(report: Report, cfg: &RunConfig, command: &str) -> Result<()> {
    report.write(cfg, command, &cfg.output_dir)?;
    eprintln!(
        "{command}: {} records written to {}",
        report.records.len(),
        cfg.output_dir.join("report.csv").display()
    );
    Ok(())
}

fn run(cmd: Command, line: &str) -> Result<()> {
    let set_corr_dt: fn(&mut RunConfig, f64) = |c, dt| c.correlation.dt = dt;
    let set_hutch_dt: fn(&mut RunConfig, f64) = |c, dt| c.sweep.hutchinson_dt = dt;
    match cmd {
        Command::ValidateConfig(c) => {
            let cfg = load(&c, None, false)?;
            println!("ok {} (d = {}, B = {})", cfg.hash(), cfg.dim(), cfg.batch_size);
            Ok(())
        }
        Command::RemainderSweep(c) => {
            let cfg = load(&c, None, false)?;
            let report = with_workers(cfg.workers, || run_remainder_sweep(&cfg))??;
            finish(report, &cfg, line)
        }
        Command::HutchinsonSweep(c) => {
            let cfg = load(&c, Some(set_hutch_dt), false)?;
            let report = with_workers(cfg.workers, || run_hutchinson_sweep(&cfg))??;
            finish(report, &cfg, line)
        }
        Command::Correlate(c) => {
            let cfg = load(&c, Some(set_corr_dt), true)?;
            let report = with_workers(cfg.workers, || run_correlation_experiment(&cfg))??;
            finish(report, &cfg, line)
        }
        Command::OtBaseline(a) => {
            let cfg = load(&a.common, Some(set_corr_dt), true)?;
            let report = with_workers(cfg.workers, || run_ot_baseline(&cfg, a.sampler.into()))??;
            finish(report, &cfg, line)
        }
        Command::Sample(a) => {
            let cfg = load(&a.common, None, false)?;
            let storage = a.store.unwrap_or(Storage::Endpoints);
            let (report, path) = with_workers(cfg.workers, || run_sample(&cfg, a.sampler.into(), storage))??;
            if a.store.is_some() {
                write_artifact(&cfg.output_dir, "path.bin", |w| write_sample_path(w, &path))?;
            }
            finish(report, &cfg, line)
        }
        Command::Sensitivity(a) => {
            let cfg = load(&a.common, None, false)?;
            let storage = a.store.unwrap_or(Storage::Endpoints);
            let (report, path, psi) =
                with_workers(cfg.workers, || run_sensitivity(&cfg, a.sampler.into(), storage))??;
            if a.store.is_some() {
                write_artifact(&cfg.output_dir, "path.bin", |w| write_sample_path(w, &path))?;
                write_artifact(&cfg.output_dir, "psi.bin", |w| write_sensitivity_path(w, &path, &psi))?;
            }
            finish(report, &cfg, line)
        }
    }
}

/// Parse `argv` (program name first), run, and return the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let line = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(" ");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli.command, &line) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn storage_values() {
        assert_eq!(parse_storage("full"), Ok(Storage::Full));
        assert_eq!(parse_storage("endpoints"), Ok(Storage::Endpoints));
        assert_eq!(parse_storage("4"), Ok(Storage::Strided(4)));
        assert!(parse_storage("0").is_err());
        assert!(parse_storage("half").is_err());
    }

    #[test]
    fn argument_errors_exit_2() {
        assert_eq!(cli_main(["diffsens", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(cli_main(["diffsens"]), EXIT_CONFIG);
        assert_eq!(cli_main(["diffsens", "validate-config", "--config", "/nonexistent.toml"]), EXIT_CONFIG);
        assert_eq!(cli_main(["diffsens", "--help"]), EXIT_OK);
    }

    #[test]
    fn error_classes_map_to_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Integration { step: 1, message: "nan".into() }), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::transport("eof", None)), EXIT_NUMERICAL);
    }
}

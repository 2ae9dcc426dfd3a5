//! Long-format CSV reports plus a JSON metadata sidecar.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde::Serialize;

use super::config::RunConfig;
use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "config_hash",
    "experiment",
    "sampler",
    "density",
    "n_probes",
    "dt",
    "eta_bar",
    "sample",
    "statistic",
    "value",
];

/// One statistic. Empty fields are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub experiment: String,
    pub sampler: Option<String>,
    pub density: Option<String>,
    pub n_probes: Option<usize>,
    pub dt: Option<f64>,
    pub eta_bar: Option<f64>,
    pub sample: Option<usize>,
    pub statistic: String,
    pub value: f64,
}

impl Record {
    pub fn new(experiment: &str, statistic: &str, value: f64) -> Self {
        Self {
            experiment: experiment.to_string(),
            sampler: None,
            density: None,
            n_probes: None,
            dt: None,
            eta_bar: None,
            sample: None,
            statistic: statistic.to_string(),
            value,
        }
    }

    pub fn sampler(mut self, s: impl Into<String>) -> Self {
        self.sampler = Some(s.into());
        self
    }

    pub fn density(mut self, d: impl Into<String>) -> Self {
        self.density = Some(d.into());
        self
    }

    pub fn n_probes(mut self, n: Option<usize>) -> Self {
        self.n_probes = n;
        self
    }

    pub fn dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn eta_bar(mut self, eta: f64) -> Self {
        self.eta_bar = Some(eta);
        self
    }

    pub fn sample(mut self, i: usize) -> Self {
        self.sample = Some(i);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config_hash: String,
    pub records: Vec<Record>,
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

impl Report {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            config_hash: cfg.hash(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, r: Record) {
        self.records.push(r);
    }

    /// Records matching `statistic`, in report order.
    pub fn select<'a>(&'a self, statistic: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.statistic == statistic)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(CSV_HEADER).map_err(io)?;
        for r in &self.records {
            w.write_record([
                self.config_hash.clone(),
                r.experiment.clone(),
                opt(&r.sampler),
                opt(&r.density),
                opt(&r.n_probes),
                opt(&r.dt),
                opt(&r.eta_bar),
                opt(&r.sample),
                r.statistic.clone(),
                r.value.to_string(),
            ])
            .map_err(io)?;
        }
        w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))
    }

    /// Write `report.csv` and `meta.json` into `dir`.
    pub fn write(&self, cfg: &RunConfig, command: &str, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv()?)?;
        let meta = Meta {
            config_hash: &self.config_hash,
            command,
            seed: cfg.seed,
            git_revision: git_revision(),
            crate_version: env!("CARGO_PKG_VERSION"),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config: cfg,
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        fs::write(dir.join("meta.json"), json)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    config_hash: &'a str,
    command: &'a str,
    seed: u64,
    git_revision: String,
    crate_version: &'a str,
    created_unix: u64,
    config: &'a RunConfig,
}

fn git_revision() -> String {
    Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

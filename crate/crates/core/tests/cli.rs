use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use diffsens::artifact::{self, Content};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs")
}

fn diffsens(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffsens")).args(args).output().unwrap()
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

#[test]
fn shipped_configs_validate() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let out = diffsens(&["validate-config", "--config", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
    }
}

#[test]
fn unknown_subcommand_exits_2_with_usage() {
    let out = diffsens(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[rho]\nmeans = [[0.0]]\n").unwrap();
    let out = diffsens(&["validate-config", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));
    let out = diffsens(&["remainder-sweep", "--config", &config("mixture_d10.toml"), "--eta", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn backend_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ext.toml");
    fs::write(
        &cfg,
        r#"
        [rho]
        dim = 2
        constant_means = [0.0]
        std = [1.0]
        [nu]
        dim = 2
        constant_means = [1.0]
        std = [1.0]
        [density]
        mode = "trace"
        [backend]
        kind = "external"
        command = ["/nonexistent/score-server"]
        "#,
    )
    .unwrap();
    let out = diffsens(&["sample", "--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn small_remainder_sweep_is_fast_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = diffsens(&[
        "remainder-sweep",
        "--config",
        &config("mixture_d10.toml"),
        "--dt",
        "1e-3",
        "--eta",
        "0.1",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert!(start.elapsed() < Duration::from_secs(60));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 2, "{csv}");
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("meta.json")).unwrap()).unwrap();
    let hash = meta["config_hash"].as_str().unwrap();
    assert!(lines[1..].iter().all(|l| l.starts_with(hash)));
    assert!(meta["git_revision"].is_string());
    assert_eq!(meta["seed"], meta["config"]["seed"]);
}

#[test]
fn reports_are_byte_identical_across_workers_and_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for (dir, workers) in [(&a, "1"), (&b, "3")] {
        let out = diffsens(&[
            "remainder-sweep",
            "--config",
            &config("mixture_d10.toml"),
            "--dt",
            "5e-3",
            "--batch-size",
            "32",
            "--workers",
            workers,
            "--output",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir| fs::read(d.path().join("report.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn sensitivity_writes_readable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffsens(&[
        "sensitivity",
        "--config",
        &config("mixture_d10.toml"),
        "--dt",
        "1e-2",
        "--batch-size",
        "8",
        "--store",
        "10",
        "--output",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let path = artifact::read(&mut fs::File::open(dir.path().join("path.bin")).unwrap()).unwrap();
    let psi = artifact::read(&mut fs::File::open(dir.path().join("psi.bin")).unwrap()).unwrap();
    assert_eq!(path.header.content, Content::Positions);
    assert_eq!(psi.header.content, Content::Sensitivity);
    assert_eq!(psi.header.stride, 10);
    assert_eq!(psi.states.shape(), [psi.header.stored_steps.len(), 8, 10]);
    assert!(psi.states.slice(ndarray::s![0, .., ..]).iter().all(|x| *x == 0.0));
    let sample = path.into_sample_path().unwrap();
    assert_eq!(sample.batch_size(), 8);
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert!(csv.contains("median_psi_norm"));
}

#[test]
fn sample_and_ot_baseline_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    let out = diffsens(&["sample", "--config", &config("degenerate_d10.toml"), "--sampler", "sde", "--store", "endpoints", "--output", o]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let path = artifact::read(&mut fs::File::open(dir.path().join("path.bin")).unwrap()).unwrap();
    assert_eq!(path.header.stored_steps, vec![0, path.header.n_steps]);
    assert!(!path.header.has_noise);
    let out = diffsens(&["ot-baseline", "--config", &config("degenerate_d10.toml"), "--dt", "1e-2", "--batch-size", "16", "--output", o]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",ray_norm,")).count(), 16);
}

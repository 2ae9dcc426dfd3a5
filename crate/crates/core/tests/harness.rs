use std::path::Path;

use diffsens::harness::config::{Overrides, RunConfig, Statistic};
use diffsens::harness::experiments::{
    run_correlation_experiment, run_hutchinson_sweep, run_remainder_sweep, HUTCHINSON, REMAINDER,
};
use diffsens::harness::report::Record;

fn load(name: &str, o: Overrides) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    RunConfig::load(&path).unwrap().apply(&o).unwrap()
}

fn small() -> Overrides {
    Overrides {
        batch_size: Some(32),
        ..Default::default()
    }
}

/// Two-bump target with a perturbation off the diagonal, so centered correlations are defined.
const OFF_DIAGONAL: &str = r#"
    seed = 5
    batch_size = 64
    [rho]
    dim = 4
    constant_means = [-1.0, 1.0]
    std = [0.1]
    [nu]
    means = [[1.0, 0.6, 0.2, -0.2]]
    std = [0.3]
    [correlation]
    mode = "backend"
    dt = 1e-2
"#;

#[test]
fn remainder_rows_cover_every_combination() {
    let cfg = load("mixture_d10.toml", small());
    let report = run_remainder_sweep(&cfg).unwrap();
    let n = cfg.sweep.samplers.len() * cfg.sweep.dt.len() * cfg.sweep.eta_bar.len();
    assert_eq!(report.records.len(), n);
    assert!(report.records.iter().all(|r| r.experiment == REMAINDER && r.value.is_finite()));
}

#[test]
fn identical_measures_leave_no_remainder() {
    let cfg = load("degenerate_d10.toml", Overrides::default());
    let report = run_remainder_sweep(&cfg).unwrap();
    for r in &report.records {
        assert!(r.value.abs() <= 1e-9, "{r:?}");
    }
}

#[test]
fn hutchinson_sweep_shares_the_exact_reference_with_the_remainder_sweep() {
    let o = Overrides {
        dt: Some(vec![1e-3]),
        ..small()
    };
    let cfg = load("mixture_d10.toml", o);
    let sweep = run_remainder_sweep(&cfg).unwrap();
    let hutch = run_hutchinson_sweep(&cfg).unwrap();
    let exact: Vec<&Record> = hutch.records.iter().filter(|r| r.density.as_deref() == Some("exact")).collect();
    let ode: Vec<&Record> = sweep.records.iter().filter(|r| r.sampler.as_deref() == Some("ode")).collect();
    assert_eq!(exact.len(), ode.len());
    for (h, r) in exact.iter().zip(&ode) {
        assert_eq!(h.experiment, HUTCHINSON);
        assert_eq!((h.eta_bar, h.value.to_bits()), (r.eta_bar, r.value.to_bits()));
    }
    let at_one = |probes: usize| {
        hutch
            .records
            .iter()
            .find(|r| r.n_probes == Some(probes) && r.eta_bar == Some(1.0))
            .unwrap()
            .value
    };
    for pair in cfg.sweep.probes.windows(2) {
        assert!(at_one(pair[1]) <= 1.2 * at_one(pair[0]), "{pair:?}");
    }
}

#[test]
fn candidate_equal_to_reference_correlates_perfectly() {
    let mut cfg = RunConfig::parse(OFF_DIAGONAL, Path::new(".")).unwrap();
    for stat in [Statistic::Pearson, Statistic::Spearman, Statistic::Cosine] {
        cfg.correlation.statistic = stat;
        let report = run_correlation_experiment(&cfg).unwrap();
        let per_sample: Vec<f64> = report.select("corr_reference_candidate").map(|r| r.value).collect();
        assert_eq!(per_sample.len(), cfg.batch_size);
        assert!(per_sample.iter().all(|c| (c - 1.0).abs() < 1e-12), "{stat:?}");
    }
}

#[test]
fn one_probe_hutchinson_candidate_tracks_the_reference() {
    let cfg = load("backend_hutchinson_d10.toml", small());
    let report = run_correlation_experiment(&cfg).unwrap();
    let median = report.select("median_corr_reference_candidate").next().unwrap().value;
    assert!(median > 0.9, "{median}");

    let mut off = RunConfig::parse(OFF_DIAGONAL, Path::new(".")).unwrap();
    off.correlation.density = diffsens::harness::config::DensityConfig::Hutchinson { n_probes: 1 };
    let report = run_correlation_experiment(&off).unwrap();
    let median = report.select("median_corr_reference_candidate").next().unwrap().value;
    assert!(median > 0.9, "pearson, off-diagonal: {median}");
}

#[test]
fn prediction_mode_records_every_sample() {
    let mut cfg = load("correlation_d10.toml", small());
    cfg.correlation.dt = 1e-2;
    let report = run_correlation_experiment(&cfg).unwrap();
    assert_eq!(report.select("corr_psi_actual").count(), 32);
    assert_eq!(report.select("corr_ot_actual").count(), 32);
    let psi = report.select("median_corr_psi_actual").next().unwrap().value;
    let ot = report.select("median_corr_ot_actual").next().unwrap().value;
    assert!(psi > ot, "{psi} vs {ot}");
    assert_eq!(report.select("ot_iterations").count(), 1);
}

use hessope::estimators::{dr_derivatives_analytic_with_cross_sign, EstimatorKind};
use hessope::harness::{
    mean_and_stderr, run_offpolicy_sweep, run_sample_sweep, run_validation_suite,
    run_validation_suite_with, ExperimentConfig, SweepReport,
};
use hessope::mdp::RandomMdpParams;
use hessope::Exec;

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        mdp: RandomMdpParams {
            num_states: 4,
            num_actions: 3,
            dirichlet_alpha: 0.5,
            horizon: 6,
            ..RandomMdpParams::default()
        },
        epsilon_grid: vec![0.0, 0.4, 0.8],
        sample_grid: vec![5, 20],
        num_samples: 40,
        num_seeds: 3,
        master_seed: 17,
        ..ExperimentConfig::default()
    }
}

fn per_seed(report: &SweepReport) -> impl Iterator<Item = &hessope::harness::SweepRow> {
    report
        .rows
        .iter()
        .filter(|r| r.seed != "mean" && r.seed != "stderr")
}

#[test]
fn sweeps_are_deterministic_across_executors() {
    let config = small_config();
    let a = run_offpolicy_sweep(&config, Exec::Sequential).unwrap();
    let b = run_offpolicy_sweep(&config, Exec::Parallel).unwrap();
    assert_eq!(a.to_csv_string().unwrap(), b.to_csv_string().unwrap());
    let c = run_sample_sweep(&config, Exec::Parallel).unwrap();
    let d = run_sample_sweep(&config, Exec::Parallel).unwrap();
    assert_eq!(c.to_csv_string().unwrap(), d.to_csv_string().unwrap());
}

#[test]
fn accuracies_lie_in_unit_interval() {
    let report = run_offpolicy_sweep(&small_config(), Exec::Parallel).unwrap();
    for r in per_seed(&report) {
        assert!(
            r.accuracy.is_nan() || (-1.0..=1.0).contains(&r.accuracy),
            "{r:?}"
        );
    }
}

#[test]
fn aggregate_rows_match_per_seed_rows() {
    let config = small_config();
    let report = run_sample_sweep(&config, Exec::Parallel).unwrap();
    for value in ["5", "20"] {
        for kind in &config.estimators {
            for &m in &config.orders {
                let accs: Vec<f64> = per_seed(&report)
                    .filter(|r| {
                        r.sweep_value == value
                            && r.estimator == kind.label()
                            && r.derivative_order == m
                    })
                    .map(|r| r.accuracy)
                    .collect();
                assert_eq!(accs.len(), config.num_seeds);
                let valid: Vec<f64> = accs.iter().copied().filter(|a| !a.is_nan()).collect();
                let n = valid.len() as f64;
                let mean = valid.iter().sum::<f64>() / n;
                let var = valid.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
                let se = (var / n).sqrt();
                let label = kind.label();
                assert!((report.mean(value, &label, m).unwrap() - mean).abs() < 1e-12);
                assert!((report.stderr(value, &label, m).unwrap() - se).abs() < 1e-12);
                assert_eq!(
                    mean_and_stderr(&accs).0,
                    report.mean(value, &label, m).unwrap()
                );
            }
        }
    }
}

#[test]
fn single_cell_grid_gives_single_cell_report() {
    let config = ExperimentConfig {
        sample_grid: vec![10],
        num_seeds: 1,
        estimators: vec![EstimatorKind::Dr],
        orders: vec![2],
        ..small_config()
    };
    let report = run_sample_sweep(&config, Exec::Parallel).unwrap();
    // one per-seed row plus the mean and stderr rows
    assert_eq!(report.rows.len(), 3);
    assert_eq!(report.stderr("10", "dr", 2), Some(0.0));
    assert_eq!(report.rows[0].n_samples, 10);
}

#[test]
fn epsilon_zero_rows_are_on_policy() {
    let report = run_offpolicy_sweep(&small_config(), Exec::Parallel).unwrap();
    for r in report.rows.iter().filter(|r| r.sweep_value == "0") {
        assert_eq!(r.l1_distance, 0.0);
        assert_eq!(r.epsilon_mixture, 0.0);
    }
    for r in report.rows.iter().filter(|r| r.sweep_value == "0.8") {
        assert!((r.l1_distance - 0.8 * 2.0 * (1.0 - 1.0 / 3.0)).abs() < 1e-12);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let empty = ExperimentConfig {
        epsilon_grid: vec![],
        ..small_config()
    };
    assert!(run_offpolicy_sweep(&empty, Exec::Parallel).is_err());
    let bad_eps = ExperimentConfig {
        epsilon_grid: vec![1.5],
        ..small_config()
    };
    assert!(run_offpolicy_sweep(&bad_eps, Exec::Parallel).is_err());
    let no_samples = ExperimentConfig {
        sample_grid: vec![0],
        ..small_config()
    };
    assert!(run_sample_sweep(&no_samples, Exec::Parallel).is_err());
}

#[test]
fn validation_suite_passes() {
    let report = run_validation_suite(Exec::Parallel).unwrap();
    for c in &report.checks {
        assert!(
            c.passed,
            "{} failed: {} vs {}",
            c.name, c.max_error, c.tolerance
        );
    }
    assert!(report.passed);
    let json: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
    assert_eq!(
        json["checks"].as_array().unwrap().len(),
        report.checks.len()
    );
}

#[test]
fn flipped_cross_term_sign_is_caught() {
    let report = run_validation_suite_with(
        &|theta, ctx, traj| dr_derivatives_analytic_with_cross_sign(theta, ctx, traj, -1.0),
        Exec::Parallel,
    )
    .unwrap();
    assert!(!report.passed);
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    assert_eq!(failed, ["dr_recursion_matches_autodiff"]);
}

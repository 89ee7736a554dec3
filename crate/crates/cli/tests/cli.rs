use std::fs;
use std::process::{Command, Output};

fn hessope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hessope"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &[
    "--num-states",
    "4",
    "--num-actions",
    "3",
    "--horizon",
    "6",
    "--num-seeds",
    "2",
    "--num-samples",
    "30",
    "--epsilon",
    "0,0.5",
];

#[test]
fn sweep_csv_is_identical_for_any_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for workers in ["1", "4", "8"] {
        let path = dir.path().join(format!("w{workers}.csv"));
        let mut args = vec![
            "sweep-offpolicy",
            "--workers",
            workers,
            "--out",
            path.to_str().unwrap(),
        ];
        args.extend_from_slice(SMALL);
        let out = hessope(&args);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        outputs.push(fs::read(&path).unwrap());
        assert!(path.with_extension("gp").exists());
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    assert!(text.starts_with(
        "sweep_axis,sweep_value,seed,estimator,critic,derivative_order,accuracy,n_samples,epsilon_mixture,l1_distance\n"
    ));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(
        hessope(&["sweep-offpolicy", "--no-such-flag"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        hessope(&["sweep-offpolicy", "--estimators", "bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        hessope(&["gen-mdp", "--gamma", "1.5"]).status.code(),
        Some(2)
    );
    assert_eq!(
        hessope(&["sweep-samples", "--epsilon", "0.1,0.2"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        hessope(&["validate", "--config", "/no/such/file.json"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn validate_exits_zero_and_prints_json() {
    let out = hessope(&["validate"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["passed"], true);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    fs::write(
        &config,
        r#"{"num_states": 3, "num_actions": 2, "horizon": 5, "seed": 4}"#,
    )
    .unwrap();
    let from_file = hessope(&["gen-mdp", "--config", config.to_str().unwrap()]);
    assert!(from_file.status.success());
    let mdp: serde_json::Value = serde_json::from_slice(&from_file.stdout).unwrap();
    assert_eq!(mdp["num_states"], 3);
    assert_eq!(mdp["horizon"], 5);

    let overridden = hessope(&[
        "gen-mdp",
        "--config",
        config.to_str().unwrap(),
        "--horizon",
        "7",
    ]);
    let mdp: serde_json::Value = serde_json::from_slice(&overridden.stdout).unwrap();
    assert_eq!(mdp["horizon"], 7);
    assert_eq!(mdp["num_actions"], 2);

    fs::write(&config, r#"{"unknown_key": 1}"#).unwrap();
    assert_eq!(
        hessope(&["gen-mdp", "--config", config.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn other_subcommands_produce_output() {
    let out = hessope(&["tmaml-bias"]);
    assert!(out.status.success());
    let audit: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(audit["frobenius_norm"].as_f64().unwrap() > 1e-3);

    let out = hessope(&["plugin-bias", "--num-samples", "1,64", "--num-seeds", "20"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 3);

    let out = hessope(&["meta-demo", "--iterations", "5"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("iteration,pre_value,post_value,grad_norm\n"));
    assert_eq!(text.lines().count(), 6);
}

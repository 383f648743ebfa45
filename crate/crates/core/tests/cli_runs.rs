//! End-to-end runs through the CLI layer: artifacts, schema, determinism.

use isac_sim::cli::{run_cli, CliArgs, METRICS_HEADER};

fn toy_config_file(dir: &std::path::Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
            "n_e": 3,
            "n_rf_grid": [2],
            "p_max_grid_dbm": [0.0, 10.0],
            "t_slots": 8,
            "trials": 2,
            "k_targets": 1,
            "u_users": 1,
            "l_antennas": 1,
            "codebook_bits": 2,
            "gamma_dbm": "inf",
            "range_min_m": 0.05,
            "range_max_m": 0.15,
            "elev_min_deg": 5.0,
            "elev_max_deg": 70.0,
            "grid_r_min_m": 0.05,
            "grid_r_max_m": 0.15,
            "grid_r_step_m": 0.05,
            "grid_elev_min_deg": 0.0,
            "grid_elev_max_deg": 70.0,
            "grid_elev_step_deg": 20.0,
            "refine_levels": 1,
            "noise_dbm": -90.0,
            "seed": 7
        }"#,
    )
    .unwrap();
    path
}

fn args(config: &std::path::Path, out: &std::path::Path, verbose: bool) -> CliArgs {
    CliArgs {
        config: Some(config.to_path_buf()),
        out: out.to_path_buf(),
        seed: None,
        trials: None,
        full_scale: false,
        verbose,
    }
}

#[test]
fn a_toy_sweep_writes_every_artifact_with_the_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config_file(dir.path());
    let out = dir.path().join("run");
    let summary = run_cli(&args(&config, &out, true)).unwrap();

    assert_eq!(summary.records, 2);
    let metrics = std::fs::read_to_string(&summary.metrics_path).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3, "header plus one row per sweep cell");
    assert!(lines[1].starts_with("0,2,"));
    assert!(lines[2].starts_with("10,2,"));

    let trials = std::fs::read_to_string(summary.trials_path.as_ref().unwrap()).unwrap();
    assert_eq!(trials.lines().count(), 1 + 4, "header plus two trials per cell");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary.manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["records"], 2);
    assert_eq!(manifest["resolved"]["seed"], 7);
    assert_eq!(manifest["resolved"]["gamma_dbm"], "inf");
    assert_eq!(manifest["rate_mean_excludes_infeasible"], true);
}

#[test]
fn repeat_runs_emit_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config_file(dir.path());
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let a = run_cli(&args(&config, &out_a, false)).unwrap();
    let b = run_cli(&args(&config, &out_b, false)).unwrap();
    let bytes_a = std::fs::read(&a.metrics_path).unwrap();
    let bytes_b = std::fs::read(&b.metrics_path).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert!(a.trials_path.is_none());
}

#[test]
fn flag_overrides_reach_the_manifest_and_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_config_file(dir.path());
    let out = dir.path().join("run");
    let mut cli = args(&config, &out, false);
    cli.trials = Some(1);
    cli.seed = Some(99);
    let summary = run_cli(&cli).unwrap();

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&summary.manifest_path).unwrap()).unwrap();
    assert_eq!(manifest["resolved"]["trials"], 1);
    assert_eq!(manifest["resolved"]["seed"], 99);

    let metrics = std::fs::read_to_string(&summary.metrics_path).unwrap();
    for row in metrics.lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        let used: usize = cols[6].parse().unwrap();
        let infeasible: usize = cols[7].parse().unwrap();
        assert_eq!(used + infeasible, 1);
    }
}

#[test]
fn invalid_configs_leave_no_artifacts_behind() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"k_targets": 9, "n_rf_grid": [4]}"#).unwrap();
    let out = dir.path().join("run");
    let err = run_cli(&args(&config, &out, true)).unwrap_err();
    assert!(err.to_string().contains("k_targets"), "unexpected message: {err}");
    assert!(!out.join("metrics.csv").exists());
    assert!(!out.join("manifest.json").exists());
}

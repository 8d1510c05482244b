use std::path::Path;
use std::process::{Command, Output};

use energy_calib::calibration::FitReport;
use energy_calib::consumption_models::{ModelCoefficients, ModelKind};
use energy_calib_cli::commands::CrossvalOutput;
use energy_calib_cli::{read_json, Artifact, RunConfig};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_energy-calib"))
        .current_dir(dir)
        .env_remove("ENERGY_CALIB_OUT")
        .args(args)
        .output()
        .expect("spawn energy-calib")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// A small dataset processed into `out/samples.csv`.
fn small_pipeline(dir: &Path) {
    ok(
        dir,
        &["--out", "out", "synth", "--runs", "3", "--run-length", "60"],
    );
    ok(
        dir,
        &["--out", "out", "process", "--manifest", "out/manifest.json"],
    );
}

#[test]
fn help_and_version_exit_zero() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(ok(tmp.path(), &["--help"]).contains("crossval"));
    assert!(ok(tmp.path(), &["--version"]).contains("energy-calib"));
}

#[test]
fn bad_flags_and_config_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(tmp.path(), &["synth", "--runs", "0"])), 2);
    assert_eq!(code(&run(tmp.path(), &["process"])), 2);
    assert_eq!(
        code(&run(
            tmp.path(),
            &["fit", "--samples", "x.csv", "--train-ratio", "1.5"]
        )),
        2
    );
    assert_eq!(
        code(&run(
            tmp.path(),
            &["crossval", "--samples", "x.csv", "--groups", "1,2;3"]
        )),
        2
    );

    std::fs::write(tmp.path().join("bad.json"), r#"{"no_such_field": 1}"#).unwrap();
    let out = run(tmp.path(), &["--config", "bad.json", "synth"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));
}

#[test]
fn missing_input_is_io_error_and_garbage_is_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&run(tmp.path(), &["fit", "--samples", "missing.csv"])),
        3
    );
    std::fs::write(tmp.path().join("junk.csv"), "run_id,mode\n1,car\n").unwrap();
    assert_eq!(
        code(&run(
            tmp.path(),
            &["--out", "o", "fit", "--samples", "junk.csv"]
        )),
        5
    );
}

#[test]
fn out_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_energy-calib"))
        .current_dir(tmp.path())
        .env("ENERGY_CALIB_OUT", "from-env")
        .args(["synth", "--runs", "1", "--run-length", "10"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(tmp.path().join("from-env/manifest.json").exists());
}

#[test]
fn synth_reruns_are_byte_identical_and_seeds_matter() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &[
            "--out",
            "a",
            "synth",
            "--runs",
            "2",
            "--run-length",
            "40",
            "--seed",
            "7",
        ],
    );
    ok(
        dir,
        &[
            "--out",
            "b",
            "synth",
            "--runs",
            "2",
            "--run-length",
            "40",
            "--seed",
            "7",
        ],
    );
    ok(
        dir,
        &[
            "--out",
            "c",
            "synth",
            "--runs",
            "2",
            "--run-length",
            "40",
            "--seed",
            "8",
        ],
    );
    for name in [
        "manifest.json",
        "acc_run01.csv",
        "hv_run02.csv",
        "provenance_synth.json",
    ] {
        let a = std::fs::read(dir.join("a").join(name)).unwrap();
        assert_eq!(
            a,
            std::fs::read(dir.join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    assert_ne!(
        std::fs::read(dir.join("a/acc_run01.csv")).unwrap(),
        std::fs::read(dir.join("c/acc_run01.csv")).unwrap()
    );
}

#[test]
fn zero_speed_floor_drops_no_slow_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &["--out", "out", "synth", "--runs", "2", "--run-length", "50"],
    );
    ok(
        dir,
        &[
            "--out",
            "out",
            "process",
            "--manifest",
            "out/manifest.json",
            "--min-speed",
            "0",
        ],
    );
    let report: serde_json::Value = read_json(&dir.join("out/cleaning_report.json")).unwrap();
    let total = &report["result"]["total"];
    assert_eq!(total["dropped_low_speed"], 0);
    assert_eq!(total["input_count"], 200);
    assert_eq!(total["dropped_first_tick"], 4);
}

#[test]
fn zero_iterations_reports_an_unconverged_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_pipeline(dir);
    ok(
        dir,
        &[
            "--out",
            "out",
            "fit",
            "--samples",
            "out/samples.csv",
            "--model",
            "aamicro",
            "--max-iters",
            "0",
        ],
    );
    let fit: Artifact<FitReport> = read_json(&dir.join("out/fit_aa_micro_acc.json")).unwrap();
    assert!(!fit.result.converged);
    assert_eq!(fit.result.solver_iterations, 0);
    assert_eq!(fit.provenance.config.solver.max_iters, 0);
    assert!(!dir.join("out/fit_arrb_acc.json").exists());
}

#[test]
fn arrb_fit_recovers_noise_free_arrb_data() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let truth = ModelCoefficients::new(
        ModelKind::Arrb,
        vec![4_000.0, 700.0, -15.0, 2.0, 350.0, 250.0],
    )
    .unwrap();
    let mut config = RunConfig::default();
    config.synth.truth_acc = truth.clone();
    config.synth.noise_rel_acc = 0.0;
    config.synth.noise_rel_hv = 0.0;
    std::fs::write(
        dir.join("config.json"),
        serde_json::to_string(&config).unwrap(),
    )
    .unwrap();

    let args = |rest: &[&'static str]| {
        let mut v = vec!["--config", "config.json", "--out", "out"];
        v.extend_from_slice(rest);
        v
    };
    ok(dir, &args(&["synth", "--runs", "3", "--run-length", "100"]));
    ok(dir, &args(&["process", "--manifest", "out/manifest.json"]));
    ok(
        dir,
        &args(&[
            "fit",
            "--samples",
            "out/samples.csv",
            "--model",
            "arrb",
            "--mode",
            "acc",
        ]),
    );

    let fit: Artifact<FitReport> = read_json(&dir.join("out/fit_arrb_acc.json")).unwrap();
    assert!(
        fit.result.r2_adj_train >= 0.999999,
        "{}",
        fit.result.r2_adj_train
    );
    assert!(
        fit.result.r2_adj_test >= 0.999999,
        "{}",
        fit.result.r2_adj_test
    );
    for (got, want) in fit.result.theta.theta.iter().zip(&truth.theta) {
        assert!(((got - want) / want).abs() < 1e-6, "{got} vs {want}");
    }
    assert_eq!(fit.provenance.config.synth.truth_acc, truth);
}

#[test]
fn crossval_in_literal_mode_writes_both_matrices() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &["--out", "out", "synth", "--runs", "3", "--run-length", "80"],
    );
    ok(
        dir,
        &["--out", "out", "process", "--manifest", "out/manifest.json"],
    );
    let stdout = ok(
        dir,
        &[
            "--out",
            "out",
            "crossval",
            "--samples",
            "out/samples.csv",
            "--metric",
            "paper-literal",
            "--groups",
            "1;2;3",
            "--bins",
            "10",
        ],
    );
    assert!(stdout.contains("paper-literal"));

    let cv: Artifact<CrossvalOutput> = read_json(&dir.join("out/crossval.json")).unwrap();
    assert_eq!(cv.provenance.metric_mode.as_str(), "paper-literal");
    for m in [&cv.result.test1, &cv.result.test2] {
        assert_eq!(m.values.len(), 3);
        assert!(m
            .values
            .iter()
            .all(|row| row.len() == 3 && row.iter().all(|v| v.is_finite() && *v >= 0.0)));
        let edges = &m.residual_summaries[0][0].histogram.edges;
        assert_eq!(edges.len(), 11);
        assert!(m
            .residual_summaries
            .iter()
            .flatten()
            .all(|s| &s.histogram.edges == edges));
    }
    for test in ["test1", "test2"] {
        let matrix =
            std::fs::read_to_string(dir.join("out").join(test).join("matrix.csv")).unwrap();
        assert_eq!(matrix.lines().count(), 10);
        assert!(matrix
            .lines()
            .skip(1)
            .all(|l| l.contains(",rmse,paper-literal,")));
        for i in 1..=3 {
            for j in 1..=3 {
                let path = dir
                    .join("out")
                    .join(test)
                    .join(format!("rss_model{i}_data{j}.csv"));
                assert_eq!(std::fs::read_to_string(path).unwrap().lines().count(), 11);
            }
        }
    }
}

#[test]
fn report_collects_earlier_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--out", "empty", "report"]);
    let empty = std::fs::read_to_string(dir.join("empty/report.md")).unwrap();
    assert!(empty.contains("run `process` first"));

    small_pipeline(dir);
    ok(
        dir,
        &[
            "--out",
            "out",
            "fit",
            "--samples",
            "out/samples.csv",
            "--model",
            "arrb",
        ],
    );
    ok(dir, &["--out", "out", "report"]);
    let md = std::fs::read_to_string(dir.join("out/report.md")).unwrap();
    assert!(md.contains("| Total_J | acc | J |"));
    assert!(md.contains("| ARRB |"));
    assert!(!md.contains("| VT-Micro |"));
    assert!(md.contains("run `crossval` first"));
}

#[test]
fn eval_scores_a_stored_model_on_each_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_pipeline(dir);
    ok(
        dir,
        &[
            "--out",
            "out",
            "fit",
            "--samples",
            "out/samples.csv",
            "--model",
            "arrb",
        ],
    );
    let stdout = ok(
        dir,
        &[
            "--out",
            "out",
            "eval",
            "--samples",
            "out/samples.csv",
            "--model-file",
            "out/model_arrb_acc.json",
        ],
    );
    assert_eq!(stdout.lines().count(), 2);
    assert!(dir.join("out/eval_model_arrb_acc_acc.json").exists());
    assert!(dir.join("out/density_model_arrb_acc_hv.csv").exists());
}

#[test]
fn process_counts_reconcile_with_the_samples_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &["--out", "out", "synth", "--runs", "2", "--run-length", "50"],
    );
    ok(
        dir,
        &[
            "--out",
            "out",
            "process",
            "--manifest",
            "out/manifest.json",
            "--energy-floor",
            "1e9",
        ],
    );
    let report: serde_json::Value = read_json(&dir.join("out/cleaning_report.json")).unwrap();
    let t = &report["result"]["total"];
    let field = |k: &str| t[k].as_u64().unwrap();
    let rows = std::fs::read_to_string(dir.join("out/samples.csv"))
        .unwrap()
        .lines()
        .count() as u64
        - 1;
    assert_eq!(field("output_count"), rows);
    assert_eq!(
        field("input_count"),
        rows + field("dropped_low_speed")
            + field("dropped_zero_accel_low_energy")
            + field("dropped_first_tick")
    );

    let summary: serde_json::Value = read_json(&dir.join("out/summary.json")).unwrap();
    for mode in ["acc", "hv"] {
        for var in ["battery_j", "engine_j", "total_j", "speed", "accel"] {
            let s = &summary["result"][mode][var];
            assert!(
                s["min"].as_f64().unwrap() <= s["mean"].as_f64().unwrap(),
                "{mode} {var}"
            );
            assert!(
                s["mean"].as_f64().unwrap() <= s["max"].as_f64().unwrap(),
                "{mode} {var}"
            );
        }
    }
}

#[test]
fn vtmicro_fit_logs_excluded_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_pipeline(dir);
    let stdout = ok(
        dir,
        &[
            "--out",
            "out",
            "fit",
            "--samples",
            "out/samples.csv",
            "--model",
            "vtmicro",
        ],
    );
    let fit: Artifact<FitReport> = read_json(&dir.join("out/fit_vt_micro_acc.json")).unwrap();
    assert!(stdout.contains(&format!(
        "excluded {} non-positive",
        fit.result.excluded_nonpositive
    )));
}

#[test]
fn crossval_cell_matches_recomputation_from_stored_model() {
    use energy_calib::energy_pipeline::read_samples;
    use energy_calib::evaluation::{group_samples, metric_rmse, residuals, MetricMode};
    use energy_calib::trajectory_store::VehicleMode;

    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &["--out", "out", "synth", "--runs", "3", "--run-length", "80"],
    );
    ok(
        dir,
        &["--out", "out", "process", "--manifest", "out/manifest.json"],
    );
    ok(
        dir,
        &[
            "--out",
            "out",
            "crossval",
            "--samples",
            "out/samples.csv",
            "--groups",
            "1;2;3",
        ],
    );

    let cv: Artifact<CrossvalOutput> = read_json(&dir.join("out/crossval.json")).unwrap();
    let samples = read_samples(std::fs::File::open(dir.join("out/samples.csv")).unwrap()).unwrap();
    let model = ModelCoefficients::from_json(
        &std::fs::read_to_string(dir.join("out/test1/model_group1.json")).unwrap(),
    )
    .unwrap();
    let group = &cv.result.test1.groups[0];
    for (mode, matrix) in [
        (VehicleMode::Acc, &cv.result.test1),
        (VehicleMode::Hv, &cv.result.test2),
    ] {
        let data = group_samples(&samples, mode, group);
        let rmse = metric_rmse(&residuals(&model, &data), MetricMode::Conventional);
        assert!(
            (rmse - matrix.values[0][0]).abs() <= 1e-9 * rmse,
            "{rmse} vs {}",
            matrix.values[0][0]
        );
    }
}

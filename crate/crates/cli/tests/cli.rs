use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qsd_cli::commands::verify_manifest;
use qsd_cli::manifest::RunManifest;
use qsd_core::io::{read_json, read_record, read_trajectory_csv, parse_grid_csv};
use qsd_core::validation::OccupancyGrid;
use qsd_core::{lindblad_solve, InitialState, SimParams};

fn qsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsd"))
        .args(args)
        .env_remove("QSD_SEED")
        .output()
        .expect("binary runs")
}

fn qsd_env(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qsd"))
        .args(args)
        .env("QSD_SEED", seed)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> RunManifest {
    read_json(&dir.join("manifest.json")).unwrap()
}

fn files_in(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in walk(dir) {
        out.push(e.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/"));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn single_record_run_writes_one_csv_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = qsd(&["simulate", "--out-dir", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(files_in(&out), vec!["manifest.json", "records/record_000000.csv"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), s(&out.join("manifest.json")));
    let m = manifest(&out);
    assert_eq!(m.files.len(), 1);
    assert!(verify_manifest(&out.join("manifest.json")).unwrap().is_empty());
    let rec = read_record(&out.join("records/record_000000.csv")).unwrap();
    assert_eq!(rec.len(), 50);
}

#[test]
fn identical_configs_give_identical_digests() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |dir: &Path| {
        vec![
            "simulate".to_string(),
            "--out-dir".into(),
            s(dir).into(),
            "--set".into(),
            "ensemble_size=20".into(),
            "--set".into(),
            r#"outputs=["records","trajectories","grid","invariants"]"#.into(),
        ]
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let run = |dir: &Path, threads: &str| {
        let mut v = args(dir);
        v.extend(["--threads".into(), threads.into()]);
        let o = qsd(&v.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run(&a, "1");
    run(&b, "4");
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma.files, mb.files);
    assert_eq!(ma.files.len(), 20 + 20 + 1 + 2 + 1);
}

#[test]
fn seed_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&qsd(&["simulate", "--out-dir", s(&a)])), 0);
    assert_eq!(code(&qsd_env(&["simulate", "--out-dir", s(&b)], "0x2A")), 0);
    let mb = manifest(&b);
    assert_eq!(mb.config.params.master_seed, 42);
    assert_eq!(mb.rng.master_seed, 42);
    assert_ne!(manifest(&a).files[0].sha256, mb.files[0].sha256);
    assert_eq!(read_record(&b.join("records/record_000000.csv")).unwrap().provenance.unwrap().seed, 42);
    let bad = qsd_env(&["simulate", "--out-dir", s(&tmp.path().join("c"))], "forty-two");
    assert_eq!(code(&bad), 2);
}

#[test]
fn invariant_summary_on_dephasing_free_ensemble() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("inv");
    let o = qsd(&[
        "simulate",
        "--out-dir",
        s(&out),
        "--set",
        "params.gamma_phi=0",
        "--set",
        "ensemble_size=2000",
        "--set",
        r#"outputs=["invariants"]"#,
        "--set",
        "checks.max_alpha_rel_error=1e-6",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = read_json(&out.join("invariants.json")).unwrap();
    let err = v["summary"]["alpha_max_rel_error"].as_f64().unwrap();
    assert!(err < 1e-9, "{err}");
    assert_eq!(v["n_trajectories"], 2000);
    let alpha_final = v["alpha_flow_final"].as_f64().unwrap();
    let p = SimParams::reference();
    assert!((alpha_final - (p.eta + (1.0 - p.eta) * (p.gamma1 * 10.0).exp())).abs() < 1e-12);
}

#[test]
fn filter_round_trips_synthesized_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let o = qsd(&[
        "simulate",
        "--out-dir",
        s(&sim),
        "--set",
        "ensemble_size=3",
        "--set",
        r#"outputs=["records","trajectories"]"#,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for format in ["csv", "binary"] {
        let dir = tmp.path().join(format!("sim_{format}"));
        let o = qsd(&[
            "simulate",
            "--out-dir",
            s(&dir),
            "--set",
            "ensemble_size=3",
            "--set",
            &format!("record_format={format}"),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let mut args = vec!["filter".to_string(), "--out-dir".into(), s(&tmp.path().join(format!("f_{format}"))).into()];
        for r in walk(&dir.join("records")) {
            args.push(s(&r).into());
        }
        let o = qsd(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        for k in 0..3 {
            let stored = read_trajectory_csv(&sim.join(format!("trajectories/trajectory_{k:06}.csv"))).unwrap();
            let filtered =
                read_trajectory_csv(&tmp.path().join(format!("f_{format}/record_{k:06}.traj.csv"))).unwrap();
            assert_eq!(stored.len(), filtered.len());
            for (a, b) in stored.iter().zip(&filtered) {
                for i in 0..3 {
                    assert!((a.bloch[i] - b.bloch[i]).abs() <= 1e-10);
                }
            }
        }
    }
}

#[test]
fn zero_efficiency_filter_matches_lindblad() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert_eq!(code(&qsd(&["simulate", "--out-dir", s(&sim)])), 0);
    let out = tmp.path().join("lindblad");
    let o = qsd(&[
        "filter",
        "--out-dir",
        s(&out),
        "--set",
        "params.eta=0",
        s(&sim.join("records/record_000000.csv")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = read_trajectory_csv(&out.join("record_000000.traj.csv")).unwrap();
    let p = SimParams::reference().with_eta(0.0);
    for r in rows {
        let exact = lindblad_solve(InitialState::PlusX, &p, r.t).unwrap().bloch();
        for (a, b) in r.bloch.iter().zip(exact) {
            assert!((a - b).abs() < 1e-9, "t = {}", r.t);
        }
    }
}

#[test]
fn bad_record_inputs_leave_no_output() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert_eq!(code(&qsd(&["simulate", "--out-dir", s(&sim)])), 0);
    let good = sim.join("records/record_000000.csv");

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let out = tmp.path().join("out_empty");
    let o = qsd(&["filter", "--out-dir", s(&out), s(&good), s(&empty)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("empty.csv"), "{}", stderr(&o));
    assert!(!out.exists());

    let text = fs::read_to_string(&good).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[5] = "0.8,1.0,oops";
    let broken = tmp.path().join("broken.csv");
    fs::write(&broken, lines.join("\n")).unwrap();
    let out = tmp.path().join("out_broken");
    let o = qsd(&["filter", "--out-dir", s(&out), s(&broken)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("broken.csv:6"), "{}", stderr(&o));
    assert!(!out.exists());

    let o = qsd(&["filter", "--out-dir", s(&tmp.path().join("dt")), "--set", "params.dt=0.1", s(&good)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dt"), "{}", stderr(&o));
}

#[test]
fn analyze_reports_invariants() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let o = qsd(&["simulate", "--out-dir", s(&sim), "--set", "params.gamma_phi=0", "--set", "ensemble_size=4"]);
    assert_eq!(code(&o), 0);
    let mut args: Vec<String> = vec![
        "analyze".into(),
        "--params-from-record".into(),
        "--out-dir".into(),
        s(&tmp.path().join("an")).into(),
        "--set".into(),
        "checks.max_alpha_rel_error=1e-9".into(),
    ];
    args.extend(walk(&sim.join("records")).iter().map(|p| s(p).to_string()));
    let o = qsd(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = read_json(&tmp.path().join("an/analysis.json")).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 4);
    assert!(v["summary"]["reconstruction_max_distance"].as_f64().unwrap() < 1e-9);
}

#[test]
fn calibrated_validation_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("val");
    let o = qsd(&[
        "validate",
        "--out-dir",
        s(&out),
        "--set",
        "params.horizon=4",
        "--set",
        "ensemble_size=20000",
        "--set",
        r#"tomography.axes=["x","z"]"#,
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m.checks.len(), 4);
    assert!(out.join("tomography_x.json").exists() && out.join("tomography_z.json").exists());
}

#[test]
fn miscalibrated_validation_fails_on_slope() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("val");
    let o = qsd(&[
        "validate",
        "--out-dir",
        s(&out),
        "--set",
        "params.horizon=4",
        "--set",
        "ensemble_size=20000",
        "--set",
        r#"tomography.axes=["x"]"#,
        "--set",
        "tomography.filter_eta=0.05",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("tomography.x.slope"), "{}", stderr(&o));
}

#[test]
fn ground_state_estimation_surfaces_boundary_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    let o = qsd(&["simulate", "--out-dir", s(&sim), "--set", "initial=ground", "--set", "ensemble_size=5"]);
    assert_eq!(code(&o), 0);
    let mut args: Vec<String> = vec![
        "estimate-eta".into(),
        "--out-dir".into(),
        s(&tmp.path().join("est")).into(),
        "--set".into(),
        "initial=ground".into(),
    ];
    args.extend(walk(&sim.join("records")).iter().map(|p| s(p).to_string()));
    let o = qsd(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("likelihood.boundary"), "{}", stderr(&o));
    let v: serde_json::Value = read_json(&tmp.path().join("est/likelihood.json")).unwrap();
    assert!(v["boundary_warning"].as_bool().unwrap());
    assert_eq!(v["curve"].as_array().unwrap()[0].as_array().unwrap().len(), 2);
    assert!(v.get("eta_hat").is_some() && v.get("ci95").is_some());
}

#[test]
fn estimation_from_synthesized_ensemble() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("est");
    let o = qsd(&[
        "estimate-eta",
        "--out-dir",
        s(&out),
        "--set",
        "ensemble_size=2000",
        "--set",
        "checks.eta_window=[0.1,0.4]",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = read_json(&out.join("likelihood.json")).unwrap();
    let ci = v["ci95"].as_array().unwrap();
    assert!(ci[0].as_f64().unwrap() < 0.24 && 0.24 < ci[1].as_f64().unwrap());
}

#[test]
fn grid_outputs_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("grid");
    let o = qsd(&["grid", "--out-dir", s(&out), "--set", "ensemble_size=300", "--set", "grid_times=[0,2,4]"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let grid: OccupancyGrid = read_json(&out.join("grid.json")).unwrap();
    let csv = parse_grid_csv(&fs::read_to_string(out.join("grid.csv")).unwrap(), Path::new("grid.csv")).unwrap();
    assert_eq!(grid.slices.len(), 3);
    for ((t, cells), slice) in csv.iter().zip(&grid.slices) {
        assert_eq!(*t, slice.time);
        assert_eq!(cells, &slice.cells);
        assert_eq!(cells.iter().map(|c| c.count).sum::<u64>(), 300);
        assert!(slice.alpha_flow.is_some());
    }
}

#[test]
fn usage_and_config_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("x");
    let missing = tmp.path().join("nope.json");
    let bad_json = tmp.path().join("bad.json");
    fs::write(&bad_json, "{ \"params\": ").unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec![],
        vec!["frobnicate"],
        vec!["simulate", "--out-dir", s(&d), "--set", "ensembel_size=3"],
        vec!["simulate", "--out-dir", s(&d), "--set", "params.eta=2"],
        vec!["simulate", "--out-dir", s(&d), "--set", "noequals"],
        vec!["simulate", "--out-dir", s(&d), "--config", s(&missing)],
        vec!["simulate", "--out-dir", s(&d), "--config", s(&bad_json)],
        vec!["simulate", "--out-dir", s(&d), "--threads", "0"],
        vec!["filter", "--out-dir", s(&d)],
        vec!["filter", "--out-dir", s(&d), "--scheme", "rk4", "a.csv"],
        vec!["analyze", "--out-dir", s(&d), s(&missing)],
    ];
    for args in cases {
        let o = qsd(&args);
        assert_eq!(code(&o), 2, "{args:?}: {}", stderr(&o));
    }
    assert_eq!(code(&qsd(&["--help"])), 0);
    assert_eq!(code(&qsd(&["simulate", "--help"])), 0);
}

#[test]
fn config_file_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    let out = tmp.path().join("out");
    fs::write(
        &cfg,
        format!(
            r#"{{"params": {{"eta": 0.5, "horizon": 2.0}}, "initial": "excited", "ensemble_size": 2, "output_dir": "{}"}}"#,
            s(&out)
        ),
    )
    .unwrap();
    let o = qsd(&["simulate", "--config", s(&cfg), "--set", "params.eta=0.75"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(m.config.params.eta, 0.75);
    assert_eq!(m.config.params.horizon, 2.0);
    assert_eq!(m.config.initial, InitialState::Excited);
    let rec = read_record(&out.join("records/record_000001.csv")).unwrap();
    assert_eq!(rec.len(), 10);
    assert_eq!(rec.provenance.unwrap().eta, 0.75);
    assert!(out.join("records_mean.csv").exists());
}

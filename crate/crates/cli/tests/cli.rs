use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn filterstab(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_filterstab"))
        .args(args)
        .arg("--out-dir")
        .arg(out_dir)
        .output()
        .unwrap()
}

fn last_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .last()
        .unwrap_or("")
        .to_string()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_presets() {
    let tmp = tempfile::tempdir().unwrap();
    let out = filterstab(&["analyze", "presets:E2"], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let report = tmp.path().join("report.json");
    assert_eq!(last_line(&out), format!("RESULT 0 {}", report.display()));
    let v = json(&report);
    assert_eq!(v["observable"], false);
    assert_eq!(v["detectable"], true);

    let out = filterstab(
        &["analyze", "presets:E4", "--oracle-depth", "1"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let v = json(&report);
    assert_eq!(v["detectable"], false);
    assert_eq!(v["stable"]["value"], false);
    assert_eq!(v["oracle"]["agrees"], true);
}

#[test]
fn analyze_model_file() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m.json");
    fs::write(
        &model,
        r#"{"d": 2, "generator": [[-1, 1], [1, -1]], "h": [0, 0], "kappa": 0, "obs_kind": "white_noise"}"#,
    )
    .unwrap();
    let out = filterstab(&["analyze", model.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let v = json(&tmp.path().join("report.json"));
    assert_eq!(v["stable"]["value"], "not_applicable");

    fs::write(&model, r#"{"d": 2, "generator": [[-1, 2], [1, -1]], "h": [0, 0], "kappa": 1, "obs_kind": "white_noise"}"#)
        .unwrap();
    let out = filterstab(&["analyze", model.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 0"));
    assert_eq!(last_line(&out), "RESULT 1 -");
}

#[test]
fn missing_file_and_bad_flags_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = filterstab(&["analyze", "missing.json"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file not found"));
    assert_eq!(last_line(&out), "RESULT 1 -");

    let out = filterstab(&["simulate", "presets:E1", "--mu", "0.7,0.7"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = filterstab(&["simulate", "presets:E1", "--mu", "a,b"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    let out = filterstab(&["simulate", "presets:E1", "--bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(last_line(&out), "RESULT 1 -");
}

#[test]
fn simulate_writes_summary_and_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "presets:E2",
        "--mu",
        "0.9,0.1",
        "--nu",
        "0.5,0.5",
        "--t-max",
        "10",
        "--paths",
        "200",
        "--seed",
        "7",
    ];
    let out = filterstab(&args, tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let v = json(&tmp.path().join("summary.json"));
    assert!(
        v["mean_tv"]
            .as_array()
            .unwrap()
            .last()
            .unwrap()
            .as_f64()
            .unwrap()
            < 0.05
    );
    assert_eq!(v["checkpoints"].as_array().unwrap().len(), 16);
    for i in 0..5 {
        assert!(tmp.path().join(format!("path_{i:04}.csv")).exists());
    }
    assert!(!tmp.path().join("path_0005.csv").exists());
}

#[test]
fn simulate_e4_and_equal_priors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = filterstab(
        &[
            "simulate",
            "presets:E4",
            "--mu",
            "0.9,0.1",
            "--nu",
            "0.5,0.5",
            "--paths",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("path_0000.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let tv: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((tv - 0.4).abs() < 1e-12);
    }

    let tmp = tempfile::tempdir().unwrap();
    let out = filterstab(
        &[
            "simulate",
            "presets:E1",
            "--mu",
            "1,0",
            "--nu",
            "1,0",
            "--paths",
            "2",
            "--t-max",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("path_0001.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",0")));
}

#[test]
fn simulate_kappa_zero_needs_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("m.json");
    fs::write(
        &model,
        r#"{"d": 2, "generator": [[-1, 1], [1, -1]], "h": [0, 1], "kappa": 0, "obs_kind": "white_noise"}"#,
    )
    .unwrap();
    let m = model.to_str().unwrap();
    let out = filterstab(
        &["simulate", m, "--mu", "1,0", "--nu", "0.5,0.5"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let out = filterstab(
        &[
            "simulate",
            m,
            "--mu",
            "1,0",
            "--nu",
            "0.5,0.5",
            "--kappa-sweep",
            "0.5,1",
            "--paths",
            "4",
            "--t-max",
            "1",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let v = json(&tmp.path().join("sweep.json"));
    assert_eq!(v["sweep"].as_array().unwrap().len(), 2);
}

#[test]
fn kalman_presets_and_guards() {
    let tmp = tempfile::tempdir().unwrap();
    let out = filterstab(
        &["kalman", "presets:scalar", "--paths", "20", "--t-max", "10"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("kalman_trace.csv")).unwrap();
    assert!(csv.starts_with("t,gap,mean_xdiff"));
    for line in csv.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let exact = (1.0 / (1.0 + f[0]) - 4.0 / (1.0 + 4.0 * f[0])).abs();
        assert!((f[1] - exact).abs() < 1e-6);
    }

    let out = filterstab(&["kalman", "presets:nondetectable"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda = 1"));
    assert_eq!(last_line(&out), "RESULT 1 -");

    let out = filterstab(&["kalman", "presets:scalar", "--dt", "10"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("positive semidefinite"));
    assert_eq!(last_line(&out), "RESULT 2 -");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "simulate",
        "presets:E6",
        "--paths",
        "8",
        "--t-max",
        "2",
        "--seed",
        "5",
    ];
    filterstab(&args, a.path());
    filterstab(&args, b.path());
    for name in ["summary.json", "path_0000.csv", "path_0004.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap()
        );
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kernel_surrogate::cli_io::{load_model, parse_csv, write_dataset_csv, write_matrix_csv};
use kernel_surrogate::synthetic::BumpMap;

fn ksurr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksurr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {stdout}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn small_dataset(dir: &Path) -> String {
    let path = dir.join("data.csv");
    write_dataset_csv(&path, &BumpMap::new(3, 5).sample(80, 3)).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn train_predict_estimate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    ok(&ksurr(&[
        "train", "--data", &data, "--d", "3", "--q", "3", "--header", "--method", "vkoga-f",
        "--gamma", "1.5", "--lambda", "1e-10", "--out", out_s,
    ]));
    let model = out.join("model.json");
    let file = load_model(&model).unwrap();
    assert!(file.metadata.n_centers > 0 && file.metadata.n_centers <= 80);
    assert!(file.output_scaler.is_some());

    let model_s = model.to_str().unwrap();
    let stdout = ok(&ksurr(&[
        "predict", "--model", model_s, "--data", &data, "--header", "--out", out_s,
    ]));
    assert!(stdout.contains("E_max"));
    let errors: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("errors.json")).unwrap()).unwrap();
    assert!(errors["rmse"].as_f64().unwrap() < 1e-3, "{errors}");
    let pred = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(pred.lines().count(), 81);
    assert!(fs::read_to_string(out.join("error_vs_magnitude.csv"))
        .unwrap()
        .starts_with("output_norm,abs_error"));

    // Targets only, without the origin row whose norm is zero.
    let all = parse_csv(fs::File::open(&data).unwrap(), 3, 3, true).unwrap();
    let targets = dir.path().join("targets.csv");
    let rows = all.outputs.rows(1, 79).into_owned();
    write_matrix_csv(&targets, &["y1".into(), "y2".into(), "y3".into()], &rows).unwrap();
    ok(&ksurr(&[
        "estimate",
        "--model",
        model_s,
        "--data",
        targets.to_str().unwrap(),
        "--header",
        "--eta",
        "0.01",
        "--lower",
        "-1,-1,-1",
        "--upper",
        "1,1,1",
        "--out",
        out_s,
    ]));
    let est = fs::read_to_string(out.join("estimates.csv")).unwrap();
    let mut lines = est.lines();
    assert_eq!(
        lines.next().unwrap(),
        "target_norm,input_error,final_cost,iterations,converged,x1,x2,x3"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 79);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("")));
}

#[test]
fn cv_writes_report_and_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("cv");
    let stdout = ok(&ksurr(&[
        "cv",
        "--data",
        &data,
        "--d",
        "3",
        "--q",
        "3",
        "--header",
        "--method",
        "interp",
        "--gamma-grid",
        "0.5:2:3",
        "--lambda-grid",
        "1e-10:1e-4:3",
        "--k",
        "4",
        "--test-count",
        "10",
        "--pin",
        "0",
        "--no-timings",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert!(stdout.contains("selected gamma"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_test"], 10);
    assert_eq!(report["n_train"], 70);
    assert_eq!(report["grid"].as_array().unwrap().len(), 9);
    assert!(report.get("timings").is_none());
    assert!(report["test_errors"]["max_rel"].is_number());
    assert!(load_model(&out.join("model.json")).is_ok());

    let out = dir.path().join("val");
    ok(&ksurr(&[
        "cv",
        "--data",
        &data,
        "--d",
        "3",
        "--q",
        "3",
        "--header",
        "--method",
        "vkoga-p",
        "--gamma-grid",
        "1",
        "--lambda-grid",
        "1e-8:1e-4:2",
        "--test-fraction",
        "0.1",
        "--validation-fraction",
        "0.2",
        "--out",
        out.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"]["kind"], "validation");
    assert_eq!(report["n_validation"], 16);
    assert_eq!(report["n_test"], 8);
    assert!(report["timings"]["offline_seconds"].is_number());
}

#[test]
fn svr_train_through_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let config = dir.path().join("run.toml");
    let out = dir.path().join("svr");
    fs::write(
        &config,
        format!(
            "data = {:?}\nd = 3\nq = 3\nheader = true\nmethod = \"svr\"\nout = {:?}\n",
            data,
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    ok(&ksurr(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--gamma",
        "1",
        "--lambda",
        "0.1",
        "--epsilon",
        "1e-3",
    ]));
    let file = load_model(&out.join("model.json")).unwrap();
    assert_eq!(file.epsilon, Some(1e-3));
    assert!(file.metadata.n_centers > 0);
}

#[test]
fn trace_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("syn.csv");
    ok(&ksurr(&[
        "generate",
        "--n",
        "50",
        "--out",
        csv.to_str().unwrap(),
    ]));
    let data = parse_csv(fs::File::open(&csv).unwrap(), 3, 3, true).unwrap();
    assert_eq!(data.len(), 50);
    let out = dir.path().join("trace");
    ok(&ksurr(&[
        "trace",
        "--data",
        csv.to_str().unwrap(),
        "--d",
        "3",
        "--q",
        "3",
        "--header",
        "--method",
        "vkoga-p",
        "--max-points",
        "12",
        "--out",
        out.to_str().unwrap(),
    ]));
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,picked_index,max_power2,max_residual"));
    assert_eq!(trace.lines().count(), 13);
}

fn failure(out: &Output) -> (i32, String) {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    (out.status.code().unwrap(), stderr)
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let (code, msg) = failure(&ksurr(&[
        "train",
        "--data",
        missing.to_str().unwrap(),
        "--d",
        "3",
        "--q",
        "3",
    ]));
    assert_eq!(code, 3, "{msg}");
    assert!(msg.starts_with("ksurr: i/o error"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "0,0,0,1,1,1\n0.5,oops,0,1,1,1\n").unwrap();
    let (code, msg) = failure(&ksurr(&[
        "train",
        "--data",
        bad.to_str().unwrap(),
        "--d",
        "3",
        "--q",
        "3",
    ]));
    assert_eq!(code, 4, "{msg}");
    assert!(msg.contains("line 2"), "{msg}");

    let data = small_dataset(dir.path());
    let (code, msg) = failure(&ksurr(&[
        "train", "--data", &data, "--d", "3", "--q", "3", "--header", "--kernel", "cosine",
    ]));
    assert_eq!(code, 6, "{msg}");

    let model = dir.path().join("model.json");
    fs::write(&model, "{\"format_version\": 99}").unwrap();
    let (code, msg) = failure(&ksurr(&[
        "predict",
        "--model",
        model.to_str().unwrap(),
        "--data",
        &data,
    ]));
    assert_eq!(code, 4, "{msg}");

    let (code, msg) = failure(&ksurr(&[
        "train",
        "--data",
        &data,
        "--d",
        "3",
        "--q",
        "3",
        "--header",
        "--method",
        "svr",
        "--gamma",
        "1",
        "--lambda",
        "1e-3",
        "--epsilon",
        "1e-4",
        "--svr-max-iter",
        "50",
    ]));
    assert_eq!(code, 5, "{msg}");
}

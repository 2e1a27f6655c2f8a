use std::path::Path;
use std::process::{Command, Output};

fn insram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_insram"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.to_str().unwrap().to_string()
}

#[test]
fn analytic_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = insram(&["simulate", "--model", "inception_v3", "--batch", "1", "--out", &out_arg(dir.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("latency"));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let latency = report["report"]["total_latency_s"].as_f64().unwrap();
    assert!((latency - 4.72e-3).abs() / 4.72e-3 < 1e-3);
    assert_eq!(report["report"]["per_layer"].as_array().unwrap().len(), 109);

    let mut rows = csv::Reader::from_path(dir.path().join("breakdown.csv")).unwrap();
    let fractions: f64 = rows
        .records()
        .map(|r| r.unwrap()[4].parse::<f64>().unwrap())
        .sum();
    assert!((fractions - 1.0).abs() < 1e-9);
    assert!(dir.path().join("layers.csv").exists());
}

#[test]
fn dump_plan_single_layer() {
    let dir = tempfile::tempdir().unwrap();
    let o = insram(&["simulate", "--dump-plan", "Conv2D_2b_3x3", "--out", &out_arg(dir.path())]);
    assert!(o.status.success());
    let plan: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("plan.json")).unwrap()).unwrap();
    let obj = plan.as_object().unwrap();
    assert_eq!(obj.len(), 1);
    assert_eq!(obj["Conv2D_2b_3x3"]["serial_iterations"], 43);
}

#[test]
fn dump_plan_unknown_layer_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = insram(&["simulate", "--dump-plan", "nope", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn batch_sweep_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = insram(&["simulate", "--sweep-batch", "1,2,4,8,16", "--out", &out_arg(dir.path())]);
    assert!(o.status.success());
    let mut rows = csv::Reader::from_path(dir.path().join("throughput.csv")).unwrap();
    let tput: Vec<f64> = rows.records().map(|r| r.unwrap()[2].parse().unwrap()).collect();
    assert_eq!(tput.len(), 5);
    assert!(tput.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn functional_verify_passes_on_toy() {
    let dir = tempfile::tempdir().unwrap();
    let o = insram(&[
        "simulate", "--model", "toy", "--mode", "functional", "--verify", "--seed", "3", "--threads", "2", "--out",
        &out_arg(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("verify: PASS"));
}

#[test]
fn descriptor_file_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../models/mini_inception.json");
    let o = insram(&[
        "simulate", "--model", model.to_str().unwrap(), "--mode", "functional", "--verify", "--out",
        &out_arg(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert_eq!(insram(&["simulate", "--model", "nope", "--out", &out]).status.code(), Some(3));
    assert_eq!(insram(&["simulate", "--model", "/missing/net.json", "--out", &out]).status.code(), Some(3));
    assert_eq!(insram(&["simulate", "--verify", "--out", &out]).status.code(), Some(3));
    assert_eq!(insram(&["simulate", "--batch", "0", "--out", &out]).status.code(), Some(3));
    assert_eq!(insram(&["simulate", "--bogus"]).status.code(), Some(2));

    let bad = dir.path().join("geometry.json");
    std::fs::write(&bad, "{\"num_slices\": 0}").unwrap();
    let o = insram(&["simulate", "--geometry", bad.to_str().unwrap(), "--out", &out]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn slices_override_shortens_latency() {
    let read = |slices: &str| {
        let dir = tempfile::tempdir().unwrap();
        let o = insram(&["simulate", "--slices", slices, "--out", &out_arg(dir.path())]);
        assert!(o.status.success());
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        v["report"]["total_latency_s"].as_f64().unwrap()
    };
    assert!(read("24") < read("14"));
}

#[test]
fn transpose_weights_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("w.bin");
    let data: Vec<u8> = (0..=255).collect();
    std::fs::write(&src, &data).unwrap();
    std::fs::write(dir.path().join("w.bin.json"), r#"{"shape": [4, 8, 8], "layout": "regular"}"#).unwrap();
    let t = dir.path().join("t.bin");
    let o = insram(&["transpose-weights", "--input", src.to_str().unwrap(), "--output", t.to_str().unwrap()]);
    assert!(o.status.success());
    let planes = std::fs::read(&t).unwrap();
    assert_eq!(planes.len(), 8 * 32);
    // Plane 0 holds the low bit of every element: alternating 0, 1.
    assert_eq!(planes[0], 0b1010_1010);
    let back = dir.path().join("r.bin");
    let o = insram(&[
        "transpose-weights", "--input", t.to_str().unwrap(), "--output", back.to_str().unwrap(), "--regular",
    ]);
    assert!(o.status.success());
    assert_eq!(std::fs::read(&back).unwrap(), data);
}

#[test]
fn calibrate_reproduces_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cal.json");
    let o = insram(&["calibrate", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cal: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let f = cal["dram_bound_fraction"].as_f64().unwrap();
    assert!((f - 0.395959).abs() < 1e-4);

    let run = dir.path().join("run");
    let o = insram(&["simulate", "--calibration", path.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(o.status.success());
}

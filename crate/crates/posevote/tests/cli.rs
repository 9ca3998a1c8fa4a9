use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn posevote(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posevote"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = posevote(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    posevote(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

/// Two small scenes under `root/data`.
fn dataset(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    ok(&["--seed", "5", "gen-data", "--scenes", "2", "--out", s(&data)]);
    data
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&[]), 2);
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["gen-data"]), 2);
    assert_eq!(code(&["gen-data", "--scenes", "many", "--out", "x"]), 2);
    assert_eq!(code(&["--help"]), 0);

    let dir = tempfile::tempdir().unwrap();
    let out = posevote(&[
        "--threads",
        "0",
        "gen-data",
        "--scenes",
        "1",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let report: Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(report["error"], "usage");
    assert_eq!(report["exit_code"], 2);
}

#[test]
fn unreadable_or_malformed_input_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.rkr");
    let out = s(&dir.path().join("o")).to_string();
    assert_eq!(
        code(&[
            "vote",
            "--radial",
            s(&missing),
            "--depth",
            s(&missing),
            "--intrinsics",
            s(&missing),
            "--out",
            &out
        ]),
        3
    );

    let junk = dir.path().join("junk.json");
    fs::write(&junk, b"{ not json").unwrap();
    let report = posevote(&["mmd-fit", "--source", s(&junk), "--target", s(&junk), "--out", &out]);
    assert_eq!(report.status.code(), Some(3));
    let line: Value = serde_json::from_slice(report.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "format");
}

#[test]
fn invariant_violations_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let scene = data.join("scenes/000000");
    let (radial, depth) = (scene.join("radial.rkr"), scene.join("depth.rkr"));
    let (k, out) = (data.join("intrinsics.json"), dir.path().join("v"));
    let args = [
        "vote",
        "--radial",
        s(&radial),
        "--depth",
        s(&depth),
        "--intrinsics",
        s(&k),
        "--voxel=-1",
        "--out",
        s(&out),
    ];
    assert_eq!(code(&args), 4);
}

#[test]
fn config_file_overrides_flags_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, br#"{"scenes": 1, "seed": 9}"#).unwrap();
    let out = dir.path().join("o");
    ok(&["--config", s(&cfg), "gen-data", "--scenes", "3", "--out", s(&out)]);
    assert!(out.join("scenes/000000").is_dir());
    assert!(!out.join("scenes/000001").exists());
    let written = json(&out.join("config.json"));
    assert_eq!(written["scenes"], 1);
    assert_eq!(written["seed"], 9);
    assert_eq!(written["command"], "gen-data");
    assert!(written.get("out").is_none());

    fs::write(&cfg, br#"{"scenez": 1}"#).unwrap();
    assert_eq!(code(&["--config", s(&cfg), "gen-data", "--out", s(&out)]), 2);
}

#[test]
fn thread_count_does_not_change_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--threads", "1", "gen-data", "--scenes", "3", "--out", s(&a)]);
    ok(&["--threads", "3", "gen-data", "--scenes", "3", "--out", s(&b)]);
    for i in 0..3 {
        for f in ["depth.rkr", "mask.rkr", "radial.rkr", "labels.json"] {
            let rel = format!("scenes/{i:06}/{f}");
            assert_eq!(
                fs::read(a.join(&rel)).unwrap(),
                fs::read(b.join(&rel)).unwrap(),
                "{rel}"
            );
        }
    }
}

#[test]
fn vote_estimate_eval_recovers_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let scene = data.join("scenes/000000");
    let (vote, est, eval) = (dir.path().join("vote"), dir.path().join("est"), dir.path().join("eval"));
    let k = data.join("intrinsics.json");
    let models = data.join("models/models.json");
    ok(&[
        "vote",
        "--radial",
        s(&scene.join("radial.rkr")),
        "--depth",
        s(&scene.join("depth.rkr")),
        "--intrinsics",
        s(&k),
        "--labels",
        s(&scene.join("labels.json")),
        "--out",
        s(&vote),
    ]);
    ok(&[
        "estimate",
        "--keypoints",
        s(&vote.join("keypoints.json")),
        "--models",
        s(&models),
        "--intrinsics",
        s(&k),
        "--out",
        s(&est),
    ]);
    let labels = scene.join("labels.json");
    ok(&[
        "eval",
        "--gt",
        s(&labels),
        "--est",
        s(&est.join("poses.json")),
        "--models",
        s(&models),
        "--intrinsics",
        s(&k),
        "--out",
        s(&eval),
    ]);
    let summary = json(&eval.join("summary.json"));
    assert_eq!(summary["found"], 1);
    assert_eq!(summary["add"], 1.0);
    assert_eq!(summary["ar"], 1.0);
    let csv = fs::read_to_string(eval.join("per_pose.csv")).unwrap();
    assert!(csv.starts_with("file,class_id,found,add,"));
    assert_eq!(fs::read_to_string(eval.join("auc.csv")).unwrap().lines().count(), 102);
}

#[test]
fn eval_of_identical_files_is_perfect_and_missing_estimates_fail() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let labels = data.join("scenes/000001/labels.json");
    let k = data.join("intrinsics.json");
    let models = data.join("models/models.json");
    let out = dir.path().join("same");
    ok(&[
        "eval",
        "--gt",
        s(&labels),
        "--est",
        s(&labels),
        "--models",
        s(&models),
        "--intrinsics",
        s(&k),
        "--out",
        s(&out),
    ]);
    let summary = json(&out.join("summary.json"));
    for key in ["add", "adds", "auc", "mssd", "mspd", "vsd", "ar"] {
        assert_eq!(summary[key], 1.0, "{key}");
    }

    let empty = dir.path().join("empty.json");
    fs::write(&empty, br#"{"poses": []}"#).unwrap();
    let out = dir.path().join("none");
    ok(&[
        "eval",
        "--gt",
        s(&labels),
        "--est",
        s(&empty),
        "--models",
        s(&models),
        "--intrinsics",
        s(&k),
        "--metrics",
        "ar,add",
        "--out",
        s(&out),
    ]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["found"], 0);
    assert_eq!(summary["ar"], 0.0);
    assert_eq!(summary["add"], 0.0);
    assert!(summary.get("mssd").is_none());
}

#[test]
fn mmd_fit_of_a_file_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let radial = data.join("scenes/000000/radial.rkr");
    let out = dir.path().join("mmd");
    ok(&[
        "mmd-fit",
        "--source",
        s(&radial),
        "--target",
        s(&radial),
        "--estimator",
        "biased",
        "--out",
        s(&out),
    ]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["initial"]["value"], 0.0);
    assert_eq!(summary["truncated"], false);

    let out = dir.path().join("rbf");
    assert_eq!(
        code(&[
            "mmd-fit",
            "--source",
            s(&radial),
            "--target",
            s(&radial),
            "--kernel",
            "rbf",
            "--epochs",
            "2",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn mmd_fit_reads_json_features_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let rows = |shift: f64| -> Value {
        let r: Vec<Vec<f64>> = (0..24)
            .map(|i| {
                vec![
                    (i as f64 * 0.37).sin() + shift,
                    (i as f64 * 0.11).cos(),
                    i as f64 / 24.0,
                ]
            })
            .collect();
        serde_json::json!({ "rows": r })
    };
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    fs::write(&a, rows(0.0).to_string()).unwrap();
    fs::write(&b, rows(2.0).to_string()).unwrap();
    let out = dir.path().join("fit");
    ok(&[
        "mmd-fit",
        "--source",
        s(&a),
        "--target",
        s(&b),
        "--epochs",
        "50",
        "--lr",
        "0.01",
        "--out",
        s(&out),
    ]);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 52);
    let summary = json(&out.join("summary.json"));
    let (initial, fitted) = (
        summary["initial"]["value"].as_f64().unwrap(),
        summary["final"]["value"].as_f64().unwrap(),
    );
    assert!(fitted < initial, "{fitted} !< {initial}");
    assert!(out.join("weights.json").is_file());
}

#[test]
fn pipeline_reports_every_scene() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pipe");
    ok(&[
        "--seed",
        "2",
        "pipeline",
        "--scenes",
        "2",
        "--no-refine",
        "--write-composites",
        "--out",
        s(&out),
    ]);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["scenes"], 2);
    assert_eq!(summary["pass_rate_epnp"], 1.0);
    let scene = json(&out.join("scenes/000000.json"));
    assert_eq!(scene["labels"][0]["augmented"].as_array().unwrap().len(), 7);
    assert!(scene["labels"][0]["icp_iterations"].is_null());
    assert!(out.join("scenes/000000/composite_7.rkr").is_file());
}

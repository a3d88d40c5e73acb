use std::path::Path;
use std::process::{Command, Output};

use cal_core::gmm::{em_fit, EmConfig};
use cal_core::Vec2f64;
use serde_json::Value;

const TINY: [&str; 8] = [
    "--samples",
    "3",
    "--joints",
    "4",
    "--stage1-steps",
    "5",
    "--stage2-steps",
    "5",
];

fn cal(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cal"))
        .args(args)
        .current_dir(dir)
        .env_remove("CAL_OUT_DIR")
        .output()
        .unwrap()
}

fn error_line(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    let mut lines = text.lines();
    let v: Value = serde_json::from_str(lines.next().expect("no stderr")).unwrap();
    assert!(lines.next().is_none(), "more than one stderr line: {text}");
    v
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_one_with_json() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec![],
        vec!["no-such-command"],
        vec!["encode"],
        vec!["encode", "--joint", "1;2"],
        vec!["sweep", "--resolutions", "64"],
        vec!["ablate", "--axis", "sideways"],
    ] {
        let o = cal(&args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert_eq!(error_line(&o)["error"]["kind"], "usage", "{args:?}");
    }
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    for flag in ["--help", "--version"] {
        let o = cal(&[flag], dir.path());
        assert_eq!(o.status.code(), Some(0));
        assert!(!o.stdout.is_empty());
    }
}

#[test]
fn bad_configuration_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        vec!["train-toy", "--learning-rate=-1"],
        vec!["train-toy", "--offset-loss", "none"],
        vec!["sweep", "--resolutions", "64x48"],
        vec!["encode", "--joint", "1,1", "--sigma", "0"],
    ] {
        let o = cal(&args, dir.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert_eq!(error_line(&o)["error"]["kind"], "config", "{args:?}");
    }
    std::fs::write(dir.path().join("bad.toml"), "stage1_steps = \"many\"").unwrap();
    let o = cal(&["train-toy", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = cal(&["decode", "--input", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"]["kind"], "io");
    assert!(e["error"]["message"]
        .as_str()
        .unwrap()
        .contains("missing.json"));

    std::fs::write(dir.path().join("broken.json"), "{").unwrap();
    let o = cal(&["decode", "--input", "broken.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"]["kind"], "parse");

    std::fs::write(dir.path().join("few.json"), "[[0, 0], [1, 1]]").unwrap();
    let o = cal(&["fit-gmm", "--input", "few.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train-toy"];
    args.extend(TINY);

    let o = cal(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("cal-out/report.json").exists());

    let env_dir = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_cal"))
        .args(&args)
        .current_dir(dir.path())
        .env("CAL_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("report.json").exists() && env_dir.join("steps.csv").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_cal"))
        .args(&args)
        .args(["--out", "explicit"])
        .current_dir(dir.path())
        .env("CAL_OUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("explicit/report.json").exists());
}

#[test]
fn config_files_and_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "stage1_steps = 4\nstage2_steps = 3\noffset_loss = \"smooth-l1\"\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("run.json"),
        r#"{"stage1_steps": 2, "stage2_steps": 6}"#,
    )
    .unwrap();
    let data = ["--samples", "3", "--joints", "4"];

    let mut args = vec!["train-toy", "--config", "run.toml", "--out", "a"];
    args.extend(data);
    assert!(cal(&args, dir.path()).status.success());
    let r = read_json(&dir.path().join("a/report.json"));
    assert_eq!(r["stage1"].as_array().unwrap().len(), 4);
    assert_eq!(r["stage2"].as_array().unwrap().len(), 3);
    assert_eq!(r["config"]["offset_loss"], "smooth-l1");

    let mut args = vec![
        "train-toy",
        "--config",
        "run.json",
        "--stage2-steps",
        "1",
        "--out",
        "b",
    ];
    args.extend(data);
    assert!(cal(&args, dir.path()).status.success());
    let r = read_json(&dir.path().join("b/report.json"));
    assert_eq!(r["stage1"].as_array().unwrap().len(), 2);
    assert_eq!(r["stage2"].as_array().unwrap().len(), 1);
    assert_eq!(r["schema_version"], 1);
}

#[test]
fn encode_output_decodes_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let o = cal(
        &[
            "encode",
            "--joint",
            "9.3,14.6",
            "--joint",
            "20.75,3.1",
            "--out",
            "enc.json",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let o = cal(&["decode", "--input", "enc.json"], dir.path());
    assert!(o.status.success());
    let decoded: Value = serde_json::from_slice(&o.stdout).unwrap();
    let expected = [(9.3, 14.6), (20.75, 3.1)];
    for (d, (x, y)) in decoded.as_array().unwrap().iter().zip(expected) {
        assert!((d["position"]["x"].as_f64().unwrap() - x).abs() < 1e-9);
        assert!((d["position"]["y"].as_f64().unwrap() - y).abs() < 1e-9);
        assert!((d["position_px"]["x"].as_f64().unwrap() - 4.0 * x).abs() < 1e-9);
        assert_eq!(d["used_offsets"], true);
    }
}

#[test]
fn fit_gmm_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let pts: Vec<Vec2f64> = (0..60)
        .map(|i| {
            let t = i as f64 * 0.37;
            Vec2f64::new(
                t.sin() + if i % 2 == 0 { 3.0 } else { -3.0 },
                (1.7 * t).cos(),
            )
        })
        .collect();
    let body: Vec<Value> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i % 3 == 0 {
                serde_json::json!({"x": p.x, "y": p.y})
            } else {
                serde_json::json!([p.x, p.y])
            }
        })
        .collect();
    std::fs::write(
        dir.path().join("d.json"),
        serde_json::to_string(&body).unwrap(),
    )
    .unwrap();
    let o = cal(
        &["fit-gmm", "--input", "d.json", "--k", "2", "--seed", "5"],
        dir.path(),
    );
    assert!(o.status.success());
    let out: Value = serde_json::from_slice(&o.stdout).unwrap();
    let fit = em_fit(
        &pts,
        2,
        &EmConfig {
            seed: 5,
            ..EmConfig::default()
        },
    )
    .unwrap();
    assert_eq!(out["mixture"], serde_json::to_value(&fit.mixture).unwrap());
    assert_eq!(out["samples"], 60);
    assert_eq!(out["stencil"]["radius"], 4);
}

#[test]
fn experiment_commands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut sweep = vec!["sweep", "--resolutions", "64x48,128x96", "--out", "s"];
    sweep.extend(TINY);
    assert!(cal(&sweep, dir.path()).status.success());
    let csv = std::fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);

    let mut ablate = vec!["ablate", "--axis", "loss-type", "--out", "a"];
    ablate.extend(TINY);
    assert!(cal(&ablate, dir.path()).status.success());
    let csv = std::fs::read_to_string(dir.path().join("a/ablation-loss-type.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);

    let doc = r#"{"images": [{"id": 1}], "annotations": [{"id": 1, "image_id": 1, "bbox": [0, 0, 50, 50],
                  "keypoints": [10, 10, 2, 20, 20, 2]}]}"#;
    std::fs::write(dir.path().join("gt.json"), doc).unwrap();
    let o = cal(
        &["eval", "--gt", "gt.json", "--pred", "gt.json", "--out", "e"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&dir.path().join("e/eval.json"));
    assert!(dir.path().join("e/eval.csv").exists());
    assert_eq!(summary["summary"]["ap"], 1.0);
    assert_eq!(summary["mean_oks"], 1.0);
}

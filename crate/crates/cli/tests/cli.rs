use std::path::Path;
use std::process::{Command, Output};

fn iars(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iars"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn version_prints_semver() {
    let dir = tempfile::tempdir().unwrap();
    let o = iars(&["--version"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let v = text.trim().strip_prefix("iars ").unwrap();
    let parts: Vec<u32> = v.split('.').map(|p| p.parse().unwrap()).collect();
    assert_eq!(parts.len(), 3);
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["frobnicate"][..], &["selftest", "--no-such-flag"], &[]] {
        let o = iars(args, dir.path());
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    }
}

#[test]
fn malformed_config_reports_position() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{\n  \"seed\": 3,\n  \"jobs\": ]\n}").unwrap();
    let o = iars(&["synth", "--config", "bad.json"], dir.path());
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("line 3") && err.contains("column"), "{err}");
}

#[test]
fn invalid_values_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["synth", "--variant", "m7"][..],
        &["synth", "--shrinkage", "1.5"],
        &["synth", "--alpha", "2"],
        &["train"],
    ] {
        assert_eq!(code(&iars(args, dir.path())), 2, "{args:?}");
    }
}

#[test]
fn flags_override_file_and_resolved_config_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("c.json"),
        r#"{"train": {"optimizer": {"learning_rate": 0.01}, "epochs": 4}, "synth": {"count": 3}}"#,
    )
    .unwrap();
    let o = iars(&["synth", "--config", "c.json", "--lr", "0.02", "--out", "a"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = read_json(d.join("a/config.resolved.json"));
    assert_eq!(resolved["train"]["optimizer"]["learning_rate"], 0.02);
    assert_eq!(resolved["train"]["epochs"], 4);
    assert_eq!(resolved["contour"]["harmonics"], 100);

    let o = iars(&["synth", "--config", "a/config.resolved.json", "--out", "b"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(
        std::fs::read(d.join("a/config.resolved.json")).unwrap(),
        std::fs::read(d.join("b/config.resolved.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("a/manifest.jsonl")).unwrap(),
        std::fs::read(d.join("b/manifest.jsonl")).unwrap()
    );
    let listed = read_json(d.join("a/run_manifest.json"));
    let files = listed["files"].as_array().unwrap();
    assert_eq!(files.len(), 3 * 2 + 2);
}

#[test]
fn pipeline_eval_matches_training_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let o = iars(args, d);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };
    run(&["synth", "--seed", "7", "--count", "30", "--out", "data"]);
    let train = ["train", "--data", "data", "--seed", "7", "--variant", "m4", "--width-factor", "0.125", "--epochs", "2"];
    run(&[&train[..], &["--out", "t1"]].concat());
    run(&["predict", "--data", "data", "--split", "val", "--checkpoint", "t1/model.ckpt", "--out", "p"]);
    run(&["eval-region", "--data", "data", "--split", "val", "--pred", "p", "--out", "e1"]);

    let log = read_json(d.join("t1/train_log.json"));
    let logged = log["rows"].as_array().unwrap().last().unwrap()["val_iou"].as_f64().unwrap();
    let region = read_json(d.join("e1/region.json"));
    let measured = region["mean"]["iou"].as_f64().unwrap();
    assert!((logged - measured).abs() < 1e-6, "{logged} vs {measured}");
    assert_eq!(region["variant"], "m4");

    let csv = std::fs::read_to_string(d.join("e1/region.csv")).unwrap();
    let ious: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    assert!((mean - logged).abs() < 1e-6);

    // identical configs and seeds give byte-identical outputs
    run(&[&train[..], &["--out", "t2"]].concat());
    assert_eq!(
        std::fs::read(d.join("t1/model.ckpt")).unwrap(),
        std::fs::read(d.join("t2/model.ckpt")).unwrap()
    );
    run(&["eval-region", "--data", "data", "--split", "val", "--pred", "p", "--out", "e2", "--jobs", "3"]);
    for f in ["region.csv", "region.json"] {
        assert_eq!(std::fs::read(d.join("e1").join(f)).unwrap(), std::fs::read(d.join("e2").join(f)).unwrap());
    }

    run(&["predict", "--data", "data", "--split", "test", "--checkpoint", "t1/model.ckpt", "--out", "pt"]);
    run(&["eval-contour", "--data", "data", "--split", "test", "--pred", "pt", "--harmonics", "10", "--out", "c"]);
    let contour = read_json(d.join("c/contour.json"));
    assert!(contour["headline"]["efd"].is_number() || !contour["report"]["skipped"].as_array().unwrap().is_empty());

    let o = run(&["stats-compare", "e1/region.csv", "e2/region.json", "--column", "dice", "--out", "s"]);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for k in ["u", "z", "p", "method"] {
        assert!(printed.get(k).is_some(), "{k}");
    }
    assert_eq!(printed["p"], 1.0);

    run(&["report", "e1", "c", "s", "--out", "r"]);
    let md = std::fs::read_to_string(d.join("r/summary.md")).unwrap();
    assert!(md.contains("| m4 |"));

    run(&["interpret", "--data", "data", "--split", "val", "--checkpoint", "t1/model.ckpt", "--limit", "1", "--out", "i"]);
    let listed = read_json(d.join("i/run_manifest.json"));
    let names: Vec<&str> = listed["files"].as_array().unwrap().iter().map(|f| f["path"].as_str().unwrap()).collect();
    assert!(names.iter().any(|n| n.ends_with("_mip_grid.ppm")), "{names:?}");
    // progression without all four variants is a runtime failure
    let o = iars(&["interpret", "--data", "data", "--variants", "t1/model.ckpt", "--out", "i2"], d);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("m1"), "{}", stderr(&o));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = iars(&["selftest", "--out", "st"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let results = read_json(dir.path().join("st/selftest.json"));
    assert!(results.as_array().unwrap().iter().all(|r| r["passed"] == true));
}

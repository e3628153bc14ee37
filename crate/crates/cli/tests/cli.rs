use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn polypart(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_polypart"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn eval_golden_fixture() {
    // f1: 1 TP; f2: duplicate pair -> 1 TP + 1 FP; f3: far detection FP,
    // low-score one dropped, gt missed -> 1 FN
    let o = polypart(&["eval", p(&fixture("eval_golden.json"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("| 2 | 2 | 1 | 0.500 | 0.667 | 0.571 | 0.625 |"));

    let o = polypart(&["eval", p(&fixture("eval_golden.json")), "--format", "csv"]);
    assert_eq!(
        stdout(&o),
        "tp,fp,fn,precision,recall,f1,f2\n2,2,1,0.500000,0.666667,0.571429,0.625000\n"
    );

    let o = polypart(&["eval", p(&fixture("eval_golden.json")), "--mode", "analysis", "--format", "csv"]);
    assert!(stdout(&o).ends_with("3,1,1,0.750000,0.750000,0.750000,0.750000\n"));
}

#[test]
fn empty_dataset_exits_3() {
    let empty = fixture("empty.json");
    for cmd in ["eval", "analyze"] {
        let mut args = vec![cmd, p(&empty)];
        if cmd == "analyze" {
            args.extend(["--kind", "presence"]);
        }
        let o = polypart(&args);
        assert_eq!(o.status.code(), Some(3));
        assert!(stderr(&o).contains("no frames"));
    }
}

#[test]
fn malformed_input_exits_2_with_locus() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("eval_golden.json")).unwrap()).unwrap();
    v["frames"][0]["gt_polyps"][0] = serde_json::json!([10.0, 0.0, 0.0, 10.0]);
    std::fs::write(&bad, v.to_string()).unwrap();
    let o = polypart(&["eval", p(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("frames[0] ('f1').gt_polyps[0]"), "{}", stderr(&o));

    let o = polypart(&["eval", p(&dir.path().join("missing.json"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = polypart(&["eval", p(&fixture("eval_golden.json")), "--det-threshold", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reports_are_byte_identical_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("report{i}.md"));
        let o = polypart(&["eval", p(&fixture("eval_golden.json")), "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0));
        let manifest = std::fs::read_to_string(dir.path().join(format!("report{i}.md.manifest.json"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(v["command"], "eval");
        assert_eq!(v["config"]["det_threshold"], 0.5);
        let digest = v["inputs"].as_object().unwrap().values().next().unwrap();
        assert_eq!(digest.as_str().unwrap().len(), 64);
        runs.push((std::fs::read(&out).unwrap(), v["inputs"].clone()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn correlation_of_complementary_classes() {
    let o = polypart(&["analyze", p(&fixture("complementary.json")), "--kind", "corr", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let blur = out.lines().find(|l| l.starts_with("blur,")).unwrap();
    assert_eq!(blur, "blur,NA,1.000000,NA,NA,-1.000000,NA");
}

#[test]
fn presence_area_threshold_override() {
    // blur covers 60%, 40%, 0% and 90% of the four frames
    let freq = |extra: &[&str]| {
        let mut args = vec!["analyze", "--kind", "presence", "--format", "csv"];
        let path = fixture("blur_coverage.json");
        args.push(p(&path));
        args.extend(extra);
        let o = polypart(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let out = stdout(&o);
        let row = out.lines().find(|l| l.starts_with("blur,")).unwrap().to_string();
        row.split(',').nth(1).unwrap().to_string()
    };
    assert_eq!(freq(&[]), "50.000000");
    assert_eq!(freq(&["--area-threshold", "blur=0.5"]), "50.000000");
    assert_eq!(freq(&["--area-threshold", "blur=0.3"]), "75.000000");
    assert_eq!(freq(&["--area-threshold", "blur=0.95"]), "0.000000");
    let o = polypart(&["analyze", p(&fixture("blur_coverage.json")), "--kind", "presence", "--area-threshold", "glare=0.1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overlap_without_artifacts_is_all_zero() {
    let o = polypart(&["analyze", p(&fixture("no_artifacts.json")), "--kind", "overlap", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    for line in stdout(&o).lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        assert!(cells[2..].iter().all(|c| *c == "0.000000"), "{line}");
    }
}

#[test]
fn merge_labels_summary_and_alignment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fused.json");
    let o = polypart(&[
        "merge-labels",
        p(&fixture("polyps.json")),
        p(&fixture("artifact_dets.json")),
        "--out",
        p(&out),
        "--sweep",
        "0,0.2,0.5,0.8",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // 6 detections over 3 frames at threshold 0
    assert_eq!(
        stdout(&o),
        "threshold,artifacts_per_image\n0,2.000000\n0.2,1.666667\n0.5,1.333333\n0.8,0.666667\n"
    );
    let fused = std::fs::read_to_string(&out).unwrap();
    assert!(fused.contains("\"name\": \"polyps\""));
    assert!(dir.path().join("fused.json.manifest.json").exists());

    let o = polypart(&[
        "merge-labels",
        p(&fixture("polyps.json")),
        p(&fixture("artifact_dets_mismatch.json")),
        "--out",
        p(&dir.path().join("x.json")),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("zz-unknown"));
}

#[test]
fn toy_training_run_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = polypart(&["train-toy", p(&fixture("toy_small.toml")), "--out-dir", p(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["checkpoint.json", "trace.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let trace = std::fs::read_to_string(a.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 21);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["config"]["w_pol"], 20.0);
    assert_eq!(m["config"]["config"]["w_art"], 1.0);
    assert_eq!(m["seed"], 7);

    let preds = dir.path().join("preds.json");
    let o = polypart(&[
        "predict-toy",
        p(&fixture("toy_small.toml")),
        "--checkpoint",
        p(&a.join("checkpoint.json")),
        "--out",
        p(&preds),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn toy_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    let expect = |text: &str, code: i32| {
        std::fs::write(&cfg, text).unwrap();
        let o = polypart(&["train-toy", p(&cfg), "--out-dir", p(&dir.path().join("o"))]);
        assert_eq!(o.status.code(), Some(code), "{text}: {}", stderr(&o));
    };
    expect("steps = 0\n", 2);
    expect("unknown_key = 1\n", 2);
    expect("w_reg = 0.0\nw_art = 0.0\nw_pol = 0.0\n", 2);
    expect("learning_rate = 1e300\nsteps = 5\nscenes = 2\n", 5);
}

#[test]
fn gradcheck_passes_on_fresh_model() {
    let o = polypart(&["gradcheck", p(&fixture("toy_small.toml"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "PASS"), "{out}");
}

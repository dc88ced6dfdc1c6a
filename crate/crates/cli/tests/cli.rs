use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn autolabel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autolabel")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = autolabel(args);
    assert!(
        out.status.success(),
        "{args:?}: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = autolabel(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_mover(dir: &Path) -> std::path::PathBuf {
    let scene = dir.join("scene");
    ok(&["synth", "--preset", "mover", "--out", s(&scene)]);
    scene
}

#[test]
fn label_eval_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_mover(tmp.path());
    let results = tmp.path().join("results.json");
    ok(&["label", "--scene", s(&scene), "--out", s(&results), "--set", "associate_reference_only=true"]);

    let reports = tmp.path().join("reports");
    let stdout = ok(&["eval", "--results", s(&results), "--gt", s(&scene.join("ground_truth.json")), "--out-dir", s(&reports)]);
    assert!(stdout.contains("NDS"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(reports.join("report.json")).unwrap()).unwrap();
    assert!(report["mean_ap"].as_f64().unwrap() > 0.9);
    let csv = fs::read_to_string(reports.join("report.csv")).unwrap();
    assert!(csv.starts_with("class,n_gt,n_pred,n_tp,ap@0.5,ap@1,ap@2,ap@4,mean_ap,ate,ase,aoe,ave\n"), "{csv}");
    assert!(csv.contains("\nvehicle,") && csv.contains("\nmean,"));

    let svg = tmp.path().join("bev.svg");
    ok(&["plot", "--results", s(&results), "--frame", "2", "--out", s(&svg), "--scene", s(&scene), "--gt", s(&scene.join("ground_truth.json"))]);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polygon").count(), 2);
    assert!(text.matches("<circle").count() > 10);
}

#[test]
fn ground_truth_against_itself_scores_nds_90() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_mover(tmp.path());
    let gt = scene.join("ground_truth.json");
    let stdout = ok(&["eval", "--results", s(&gt), "--gt", s(&gt), "--out-dir", s(tmp.path())]);
    assert!(stdout.contains("mAP 100.00") && stdout.contains("NDS 90.00"), "{stdout}");
}

#[test]
fn labeling_is_reproducible_across_runs_and_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = synth_mover(tmp.path());
    let mut outputs = Vec::new();
    for (i, jobs) in ["1", "1", "3"].iter().enumerate() {
        let results = tmp.path().join(format!("r{i}.json"));
        let dir = tmp.path().join(format!("e{i}"));
        ok(&["--jobs", jobs, "label", "--scene", s(&scene), "--out", s(&results)]);
        ok(&["eval", "--results", s(&results), "--gt", s(&scene.join("ground_truth.json")), "--out-dir", s(&dir)]);
        outputs.push((
            fs::read(&results).unwrap(),
            fs::read(dir.join("report.json")).unwrap(),
            fs::read(dir.join("report.csv")).unwrap(),
        ));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn dump_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let dumped = ok(&["dump-config", "--set", "stages.denoise=false"]);
    let path = tmp.path().join("cfg.json");
    fs::write(&path, &dumped).unwrap();
    assert_eq!(ok(&["dump-config", "--config", s(&path)]), dumped);
    assert!(dumped.contains("\"denoise\": false"));
    assert_ne!(ok(&["dump-config"]), dumped);
}

#[test]
fn synth_seed_changes_points_not_structure() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../specs/noisy.json");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--spec", s(&spec), "--out", s(&a)]);
    ok(&["synth", "--spec", s(&spec), "--seed", "99", "--out", s(&b)]);
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    assert_ne!(fs::read(a.join("sweeps/000000.bin")).unwrap(), fs::read(b.join("sweeps/000000.bin")).unwrap());
    // the shipped spec labels without error
    ok(&["label", "--scene", s(&a), "--out", s(&tmp.path().join("r.json")), "--config", s(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json"))]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&["label"]).0, 1);
    assert_eq!(code(&["frobnicate"]).0, 1);
    assert_eq!(code(&["--help"]).0, 0);
    let (c, err) = code(&["dump-config", "--set", "stages.dn=false"]);
    assert_eq!(c, 1, "{err}");
    assert!(err.contains("stages.dn"));

    let (c, err) = code(&["label", "--scene", s(&tmp.path().join("missing")), "--out", s(&tmp.path().join("r.json"))]);
    assert_eq!(c, 2, "{err}");
    assert!(err.contains("manifest.json"), "{err}");

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{\n  \"frames\": 3,\n  \"dt\": }").unwrap();
    let (c, err) = code(&["synth", "--spec", s(&bad), "--out", s(&tmp.path().join("x"))]);
    assert_eq!(c, 2);
    assert!(err.contains("line 3"), "{err}");

    let scene = synth_mover(tmp.path());
    let gt = scene.join("ground_truth.json");
    let (c, err) = code(&["plot", "--results", s(&gt), "--frame", "40", "--out", s(&tmp.path().join("p.svg"))]);
    assert_eq!(c, 2, "{err}");

    let odd = tmp.path().join("odd.json");
    let text = fs::read_to_string(&gt).unwrap().replace("\"car\"", "\"forklift\"");
    fs::write(&odd, text).unwrap();
    let (c, err) = code(&["eval", "--results", s(&odd), "--gt", s(&gt), "--out-dir", s(tmp.path())]);
    assert_eq!(c, 2);
    assert!(err.contains("forklift"), "{err}");
    assert_eq!(code(&["eval", "--results", s(&gt), "--gt", s(&gt), "--preset", "5"]).0, 1);
}

#[test]
fn empty_frame_plot_has_axes_only() {
    let tmp = tempfile::tempdir().unwrap();
    let results = tmp.path().join("empty.json");
    let doc = serde_json::json!({
        "header": {"format": "autolabel-results", "version": 1, "scene_id": "e", "source": "pipeline", "config_hash": null, "coordinate_frame": "ego"},
        "frames": [{"frame_index": 0, "timestamp": 0.0, "boxes": []}]
    });
    fs::write(&results, doc.to_string()).unwrap();
    let svg = tmp.path().join("e.svg");
    ok(&["plot", "--results", s(&results), "--frame", "0", "--out", s(&svg)]);
    let first = fs::read_to_string(&svg).unwrap();
    assert_eq!(first.matches("<line").count(), 2);
    assert!(!first.contains("<polygon") && !first.contains("<circle"));
    ok(&["plot", "--results", s(&results), "--frame", "0", "--out", s(&svg)]);
    assert_eq!(fs::read_to_string(&svg).unwrap(), first);
}

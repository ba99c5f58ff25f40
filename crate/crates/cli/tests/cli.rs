use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_gigadetect");

fn run(args: &[&str], env_seed: Option<&str>) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("GIGADETECT_SEED");
    if let Some(s) = env_seed {
        cmd.env("GIGADETECT_SEED", s);
    }
    cmd.output().expect("spawn gigadetect")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn error_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn scene(dir: &Path, w: usize, objects: usize) -> std::path::PathBuf {
    let out = dir.join("scene");
    let (w, n) = (w.to_string(), objects.to_string());
    ok(&["synth", "--width", &w, "--height", &w, "--objects", &n, "--seed", "1", "--out", s(&out)]);
    out
}

#[test]
fn help_for_every_command_exits_zero() {
    for cmd in [
        "tile", "detect", "stitch", "eval", "degrade", "augment", "prep-labels", "fit-curve", "synth", "netinfo", "bench",
    ] {
        let out = run(&[cmd, "--help"], None);
        assert!(out.status.success(), "{cmd} --help");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{cmd}");
    }
    assert!(run(&["--version"], None).status.success());
}

#[test]
fn usage_errors_exit_2_with_json() {
    for args in [
        vec!["frobnicate"],
        vec!["detect"],
        vec!["detect", "--image", "/no/such.png"],
        vec!["tile", "--image", "/no/such.png"],
        vec!["--workers", "0", "synth"],
        vec!["synth", "--format", "jpg"],
        vec!["eval", "--truth", "/x", "--pred", "/y"],
        vec!["augment", "--image", "/x", "--labels", "/y", "--sat", "1.5,1.0"],
    ] {
        let out = run(&args, None);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(error_json(&out)["error"]["code"], "usage", "{args:?}");
    }
    let out = run(&["synth"], Some("not-a-number"));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_the_error_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.png");
    fs::write(&bad, b"not a png").unwrap();
    let out = run(&["tile", "--image", s(&bad), "--out", s(&dir.path().join("t"))], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["code"], "image_decode");

    let sc = scene(dir.path(), 300, 5);
    fs::write(sc.join("scene.png.meta.json"), "{\"gsd\": -1}").unwrap();
    let out = run(&["tile", "--image", s(&sc.join("scene.png")), "--out", s(&dir.path().join("t2"))], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["code"], "malformed_sidecar");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"imgae": "x.png"}"#).unwrap();
    let out = run(&["detect", "--config", s(&cfg)], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out)["error"]["message"].as_str().unwrap().contains("imgae"));
}

fn detect_bytes(dir: &Path, sc: &Path, tag: &str, extra: &[&str], env_seed: Option<&str>) -> Vec<u8> {
    let out = dir.join(tag);
    let image = sc.join("scene.png");
    let truth = sc.join("truth.jsonl");
    let mut args = vec!["detect", "--image", s(&image), "--mock-truth", s(&truth), "--fp-rate", "2", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = run(&args, env_seed);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read(out.join("detections.jsonl")).unwrap()
}

#[test]
fn seed_precedence_is_flag_then_config_then_env() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scene(dir.path(), 900, 20);
    let flag7 = detect_bytes(dir.path(), &sc, "a", &["--seed", "7"], None);
    let env7 = detect_bytes(dir.path(), &sc, "b", &[], Some("7"));
    let flag_over_env = detect_bytes(dir.path(), &sc, "c", &["--seed", "7"], Some("8"));
    let default0 = detect_bytes(dir.path(), &sc, "d", &[], None);
    let zero = detect_bytes(dir.path(), &sc, "e", &["--seed", "0"], None);
    assert_eq!(flag7, env7);
    assert_eq!(flag7, flag_over_env);
    assert_eq!(default0, zero);
    assert_ne!(flag7, zero);

    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 7}"#).unwrap();
    let config_over_env = detect_bytes(dir.path(), &sc, "f", &["--config", s(&cfg)], Some("8"));
    assert_eq!(flag7, config_over_env);
    let run_json = json(&dir.path().join("f/run.json"));
    assert_eq!(run_json["command"], "detect");
    assert_eq!(run_json["config"]["seed"], 7);
}

#[test]
fn perfect_detect_then_eval_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scene(dir.path(), 1500, 60);
    let det = dir.path().join("det");
    ok(&["detect", "--image", s(&sc.join("scene.png")), "--mock-truth", s(&sc.join("truth.jsonl")), "--out", s(&det)]);
    let summary = json(&det.join("summary.json"));
    assert_eq!(summary["detections"], 60);
    assert_eq!(summary["detections_per_class"]["car"], 60);
    assert!(det.join("detections.csv").exists());

    let ev = dir.path().join("eval");
    ok(&["eval", "--truth", s(&sc.join("truth.jsonl")), "--pred", s(&det.join("detections.jsonl")), "--gsd", "0.5", "--out", s(&ev)]);
    let metrics = json(&ev.join("metrics.json"));
    assert_eq!(metrics["report"]["f1"], 1.0);
    assert_eq!(metrics["report"]["count_fraction"], 1.0);
    assert!(fs::read_to_string(ev.join("curve.csv")).unwrap().starts_with("gsd,f1,F_c"));
}

#[test]
fn tile_writes_named_chips_with_shifted_origins() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scene(dir.path(), 900, 5);
    let out = dir.path().join("tiles");
    ok(&["tile", "--image", s(&sc.join("scene.png")), "--out", s(&out)]);
    let plan = json(&out.join("plan.json"));
    let tiles = plan["tiles"].as_array().unwrap();
    assert_eq!(tiles.len(), 9);
    let chip = out.join("chips/scene|353_484_416_416.png");
    assert!(chip.exists(), "{:?}", fs::read_dir(out.join("chips")).unwrap().collect::<Vec<_>>());
    let meta = json(&out.join("chips/scene|353_484_416_416.png.meta.json"));
    assert_eq!(meta["gsd"], 0.5);
    assert_eq!(meta["origin_x"], 484.0 * 0.5);
    assert_eq!(meta["origin_y"], -353.0 * 0.5);
}

#[test]
fn stitch_merges_duplicate_records() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scene(dir.path(), 600, 10);
    let truth = sc.join("truth.jsonl");
    let out = dir.path().join("st");
    ok(&["stitch", "--inputs", s(&truth), s(&truth), "--out", s(&out)]);
    let merged = fs::read_to_string(out.join("detections.jsonl")).unwrap();
    assert_eq!(merged.lines().count(), 10);
}

#[test]
fn degrade_follows_the_floor_law_and_rescales_the_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scene(dir.path(), 301, 3);
    let out = dir.path().join("dg");
    ok(&["degrade", "--in", s(&sc.join("scene.png")), "--gsd-list", "0.7,2", "--out", s(&out)]);
    let outputs = json(&out.join("outputs.json"));
    // 301 * 0.5 / 0.7 = 215.0.., 301 * 0.5 / 2 = 75.25
    assert_eq!(outputs[0]["width"], 215);
    assert_eq!(outputs[1]["width"], 75);
    assert_eq!(json(&out.join("scene_2.00m.png.meta.json"))["gsd"], 2.0);
}

#[test]
fn prep_labels_boxes_points_at_three_metres() {
    let dir = tempfile::tempdir().unwrap();
    let pts = dir.path().join("p.json");
    fs::write(&pts, r#"[{"x": 50, "y": 40, "class_id": 0}]"#).unwrap();
    let out = dir.path().join("lab");
    ok(&["prep-labels", "--points", s(&pts), "--width", "100", "--height", "80", "--gsd", "0.3", "--out", s(&out)]);
    let text = fs::read_to_string(out.join("labels.txt")).unwrap();
    let f: Vec<f64> = text.split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(f[0], 0.0);
    assert!((f[1] - 0.5).abs() < 1e-9 && (f[2] - 0.5).abs() < 1e-9);
    assert!((f[3] - 0.1).abs() < 1e-9 && (f[4] - 10.0 / 80.0).abs() < 1e-9);
}

#[test]
fn augment_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scene(dir.path(), 200, 2);
    let labels = dir.path().join("l.txt");
    fs::write(&labels, "0 0.5 0.5 0.1 0.2\n").unwrap();
    let image = sc.join("scene.png");
    for tag in ["a", "b"] {
        ok(&["augment", "--image", s(&image), "--labels", s(&labels), "--count", "3", "--seed", "4", "--out", s(&dir.path().join(tag))]);
    }
    for f in ["manifest.json", "scene_aug0.png", "scene_aug2.txt"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    assert_eq!(json(&dir.path().join("a/manifest.json")).as_array().unwrap().len(), 3);
}

#[test]
fn fit_curve_recovers_a_planted_breakpoint() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("c.csv");
    let mut text = String::from("gsd,f1,F_c\n");
    for i in 0..30 {
        let g = 0.15 + 0.1 * i as f64;
        let f1 = if g <= 1.05 { 0.9 - 0.05 * (g - 1.05) } else { 0.9 - 0.3 * (g - 1.05) };
        text.push_str(&format!("{g},{f1},1.0\n"));
    }
    fs::write(&csv, text).unwrap();
    let out = dir.path().join("fit");
    ok(&["fit-curve", "--csv", s(&csv), "--out", s(&out)]);
    let fit = json(&out.join("fit.json"));
    assert!((fit["piecewise"]["breakpoint_gsd"].as_f64().unwrap() - 1.05).abs() < 0.011);
    assert!((fit["piecewise"]["slope_right"].as_f64().unwrap() + 0.3).abs() < 1e-6);
}

#[test]
fn netinfo_reports_the_head() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ni");
    let o = ok(&["netinfo", "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("Convolutional"));
    let info = json(&out.join("netinfo.json"));
    assert_eq!(info["layers"], 22);
    assert_eq!(info["head_filters"], 50);
    assert_eq!(info["grid_size"], 26);
}

#[test]
fn bench_reports_area_from_gsd() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b");
    ok(&["bench", "--synthetic", "--width", "2000", "--height", "1000", "--objects", "20", "--gsd", "0.3", "--out", s(&out)]);
    let r = json(&out.join("report.json"));
    assert!((r["area_km2"].as_f64().unwrap() - 0.18).abs() < 1e-12);
    assert_eq!(r["detections"], 20);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_colony-track"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn small_sim(dir: &Path) {
    let cfg = dir.join("sim.toml");
    fs::write(&cfg, "n_frames = 6\ninitial_cells = 5\nseed = 7\n").unwrap();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.join("sim").to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_track_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    small_sim(dir.path());
    let sim = dir.path().join("sim");
    assert!(sim.join("frames.jsonl").exists());
    let lineage = fs::read_to_string(sim.join("lineage.csv")).unwrap();
    assert!(lineage.starts_with("frame_index,source_id,kind,target_id_1,target_id_2"));

    let track = dir.path().join("track");
    let out = run(&[
        "track",
        "--frames",
        sim.join("frames.jsonl").to_str().unwrap(),
        "--ground-truth",
        sim.join("lineage.csv").to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        track.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("registration accuracy"), "{stdout}");
    for f in ["lineage.csv", "registration.csv", "run.json", "accuracy.json", "diagnostics/registration_trace_0.csv"] {
        assert!(track.join(f).exists(), "missing {f}");
    }
    let trace = fs::read_to_string(track.join("diagnostics/registration_trace_0.csv")).unwrap();
    assert!(trace.starts_with("step,temperature,energy,accepted"));

    let scored = dir.path().join("scored");
    let out = run(&[
        "--quiet",
        "score",
        sim.join("lineage.csv").to_str().unwrap(),
        "--ground-truth",
        sim.join("lineage.csv").to_str().unwrap(),
        "--out",
        scored.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty(), "quiet mode printed output");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(scored.join("accuracy.json")).unwrap()).unwrap();
    assert_eq!(report["mean_registration"], 1.0);
}

#[test]
fn tracking_is_reproducible_from_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    small_sim(dir.path());
    let frames = dir.path().join("sim/frames.jsonl");
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["--quiet", "track", "--frames", frames.to_str().unwrap(), "--dynamics", "sync", "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(fs::read_to_string(out_dir.join("lineage.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn calibrate_writes_weights() {
    let dir = tempfile::tempdir().unwrap();
    small_sim(dir.path());
    let sim = dir.path().join("sim");
    let out_dir = dir.path().join("cal");
    let out = run(&[
        "calibrate",
        "--frames",
        sim.join("frames.jsonl").to_str().unwrap(),
        "--ground-truth",
        sim.join("lineage.csv").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let weights = fs::read_to_string(out_dir.join("weights.toml")).unwrap();
    assert!(weights.contains("[registration]") && weights.contains("match ="));
    let report = fs::read_to_string(out_dir.join("calibration_report.csv")).unwrap();
    assert!(report.starts_with("a,score,slack"));

    // The emitted weights are accepted by `track`.
    let out = run(&[
        "--quiet",
        "track",
        "--frames",
        sim.join("frames.jsonl").to_str().unwrap(),
        "--weights",
        out_dir.join("weights.toml").to_str().unwrap(),
        "--out",
        dir.path().join("t").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("frames.jsonl");
    fs::write(&bad, "{\"frame\":0,\"id\":\"a\",\"center\":[1,1],\"e\":[1,1],\"h\":[1,1],\"width\":1}\n").unwrap();
    let out = run(&["track", "--frames", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = dir.path().join("sim.toml");
    fs::write(&cfg, "growth_rate = 0.9\n").unwrap();
    let out = run(&["simulate", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("s").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["track", "--frames", "x", "--dynamics", "metropolis", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn cell_loss_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.jsonl");
    let mut text = String::new();
    for (frame, n) in [(0, 3), (1, 2)] {
        for i in 0..n {
            let x = 20.0 + 30.0 * i as f64;
            text.push_str(&format!(
                "{{\"frame\":{frame},\"id\":\"c{i}\",\"center\":[{x},20],\"e\":[{},20],\"h\":[{},20],\"width\":6}}\n",
                x - 5.0,
                x + 5.0
            ));
        }
    }
    fs::write(&frames, text).unwrap();
    let out = run(&["track", "--frames", frames.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cell loss"));
}

#[test]
fn impossible_division_count_exits_with_three() {
    // Two far-apart cells become four far-apart cells: no children pair is
    // closer than the pairing threshold.
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames.jsonl");
    let mut text = String::new();
    let cell = |frame: usize, id: &str, x: f64, y: f64| {
        format!("{{\"frame\":{frame},\"id\":\"{id}\",\"center\":[{x},{y}],\"e\":[{},{y}],\"h\":[{},{y}],\"width\":6}}\n", x - 5.0, x + 5.0)
    };
    text.push_str(&cell(0, "a", 100.0, 100.0));
    text.push_str(&cell(0, "b", 400.0, 400.0));
    for (i, (x, y)) in [(100.0, 100.0), (400.0, 400.0), (100.0, 400.0), (400.0, 100.0)].iter().enumerate() {
        text.push_str(&cell(1, &format!("n{i}"), *x, *y));
    }
    fs::write(&frames, text).unwrap();
    let out = run(&["track", "--frames", frames.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

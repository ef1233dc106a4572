use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn skelfuse(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skelfuse"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn simulate_writes_streams_truth_and_extrinsics() {
    let dir = tempfile::tempdir().unwrap();
    let out = skelfuse(&["simulate", "--scene", "paper-layout-2walkers", "--seed", "5", "--out", "a"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<_> = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["cam0.jsonl", "cam1.jsonl", "cam2.jsonl", "cam3.jsonl", "extrinsics.json", "truth.csv"]
    );
}

#[test]
fn simulate_twice_gives_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = skelfuse(&["simulate", "--scene", "sway-1", "--seed", "9", "--out", name], dir.path());
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for file in ["cam0.jsonl", "cam3.jsonl", "truth.csv", "extrinsics.json"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert!(a == b, "{file} differs");
    }
}

#[test]
fn scene_missing_a_key_fails_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("scene.toml"),
        "name = \"x\"\n[[subjects]]\nid = \"a\"\n[subjects.motion]\nkind = \"static\"\nposition = [0.0, 0.0]\nheading_deg = 0.0\n",
    )
    .unwrap();
    let out = skelfuse(&["simulate", "--scene", "scene.toml", "--out", "o"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("duration_s"), "{}", stderr(&out));
}

#[test]
fn unknown_scene_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = skelfuse(&["simulate", "--scene", "no-such-scene", "--out", "o"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no-such-scene"));
}

#[test]
fn track_and_evaluate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| {
        let out = skelfuse(args, dir.path());
        assert!(out.status.success(), "{args:?}: {}", stderr(&out));
        out
    };
    run(&["simulate", "--scene", "walk-slow-2", "--seed", "2", "--out", "sim"]);
    run(&["track", "--input", "sim", "--out", "tracks.csv"]);
    run(&["evaluate", "--tracks", "tracks.csv", "--truth", "sim/truth.csv", "--scene", "walk-slow-2", "--out", "report.csv"]);
    let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<_> = report.lines().collect();
    assert_eq!(lines[0], "sequence,seed,variant,camera_count,subject,frames,e_avg_m,e_sd_m,mpjpe_m,fps");
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let mpjpe: f64 = line.split(',').nth(8).unwrap().parse().unwrap();
        assert!(mpjpe < 0.08, "{line}");
    }
}

#[test]
fn evaluating_truth_against_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = skelfuse(&["simulate", "--scene", "static-1", "--seed", "1", "--out", "sim"], dir.path());
    assert!(out.status.success());
    // Rewrite the truth log as a one-track frames file.
    let truth = fs::read_to_string(dir.path().join("sim/truth.csv")).unwrap();
    let mut tracks = String::new();
    for (i, line) in truth.lines().enumerate() {
        let mut cols: Vec<&str> = line.split(',').collect();
        if i == 0 {
            cols[1] = "track_id";
            tracks.push_str(&cols.join(","));
            tracks.push_str(",status\n");
        } else {
            cols[1] = "1";
            tracks.push_str(&cols.join(","));
            tracks.push_str(",AAAAAAAAAAAAAAA\n");
        }
    }
    fs::write(dir.path().join("tracks.csv"), tracks).unwrap();
    let out = skelfuse(
        &["evaluate", "--tracks", "tracks.csv", "--truth", "sim/truth.csv", "--out", "r.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report = fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let row: Vec<&str> = report.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[6].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[8].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn subject_count_mismatch_fails() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| skelfuse(args, dir.path());
    assert!(run(&["simulate", "--scene", "walk-slow-1", "--seed", "1", "--out", "one"]).status.success());
    assert!(run(&["simulate", "--scene", "walk-slow-2", "--seed", "1", "--out", "two"]).status.success());
    assert!(run(&["track", "--input", "one", "--out", "tracks.csv"]).status.success());
    let out = run(&["evaluate", "--tracks", "tracks.csv", "--truth", "two/truth.csv", "--out", "r.csv"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("s2"), "{}", stderr(&out));
}

#[test]
fn empty_stream_gives_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    assert!(skelfuse(&["simulate", "--scene", "static-1", "--out", "sim"], dir.path()).status.success());
    fs::create_dir(dir.path().join("empty")).unwrap();
    fs::write(dir.path().join("empty/cam0.jsonl"), "").unwrap();
    fs::copy(dir.path().join("sim/extrinsics.json"), dir.path().join("empty/extrinsics.json")).unwrap();
    let out = skelfuse(&["track", "--input", "empty", "--out", "t.csv"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert_eq!(text.lines().count(), 1, "header only");
}

#[test]
fn malformed_stream_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    assert!(skelfuse(&["simulate", "--scene", "static-1", "--out", "sim"], dir.path()).status.success());
    let path = dir.path().join("sim/cam0.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2] = "{not json".into();
    text = lines.join("\n");
    fs::write(&path, text).unwrap();
    let out = skelfuse(&["track", "--input", "sim", "--out", "t.csv"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains(":3"), "{}", stderr(&out));
}

#[test]
fn bench_writes_report_and_timing() {
    let dir = tempfile::tempdir().unwrap();
    let out = skelfuse(
        &[
            "bench", "--scene", "static-1", "--variant", "full", "--variant", "maf", "--cameras", "2,4", "--out", "b",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report = fs::read_to_string(dir.path().join("b/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
    let timing = fs::read_to_string(dir.path().join("b/timing.csv")).unwrap();
    let total: f64 = timing
        .lines()
        .find(|l| l.starts_with("total,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(total > 0.0);
}

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chamelion"));
    c.env("CHAMELION_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unchanged_scene_is_left_alone() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s");
    ok(&["synth", "--no-change", "--sensor-noise", "0", "--world-seed", "2", "--out", p(&scenes)]);
    let map = dir.path().join("map.ply");
    ok(&["build-map", "--session", p(&scenes.join("prior/scans.txt")), "--out", p(&map)]);
    let out = ok(&[
        "detect",
        "--map",
        p(&map),
        "--current",
        p(&scenes.join("current/scans.txt")),
        "--method",
        "occupancy",
        "--out",
        p(&dir.path().join("det")),
    ]);
    assert!(out.contains("iou=1.0000") && out.contains("f1=1.0000") && out.contains("removed=0/"), "{out}");
    let mask = std::fs::read(dir.path().join("det/map_removed.mask")).unwrap();
    assert!(mask.iter().all(|&b| b == 0));
    assert!(dir.path().join("det/labels_0009.ply").is_file());
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["build-map", "--session", "/nonexistent/scans.txt", "--out", p(&dir.path().join("m.ply"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let scenes = dir.path().join("s");
    ok(&["synth", "--out", p(&scenes)]);
    let map = dir.path().join("map.ply");
    ok(&["build-map", "--session", p(&scenes.join("prior/scans.txt")), "--out", p(&map)]);
    // the dual-head method cannot run without a model
    let o = run(&["detect", "--map", p(&map), "--current", p(&scenes.join("current/scans.txt")), "--out", p(&dir.path().join("d"))]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["train", "--pairs", p(&dir.path().join("empty")), "--out", p(&dir.path().join("m.bin"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_configuration_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["lambda = -1\n", "voxel_size = 0.1\nvoxel_size = 0.2\n", "no_such_key = 1\n", "tau_map = high\n"] {
        let cfg = dir.path().join("c.txt");
        std::fs::write(&cfg, text).unwrap();
        let o = run(&["--config", p(&cfg), "synth", "--out", p(&dir.path().join("s"))]);
        assert_eq!(o.status.code(), Some(3), "{text:?}");
    }
    let o = run(&["--config", "/nonexistent.txt", "synth", "--out", p(&dir.path().join("s"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_configuration_defaults() {
    let out = ok(&["detect", "--help"]);
    for key in ["voxel_size = 0.1", "tau_map = 0.7", "tau_scan = 0.5", "alpha = 0.01", "remove_hd = true"] {
        assert!(out.contains(key), "missing {key}");
    }
    assert!(ok(&["--help"]).contains("tau_ocl = 3"));
}

#[test]
fn perturbation_moves_poses_only() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("s");
    ok(&["synth", "--out", p(&scenes)]);
    let prior = scenes.join("prior/scans.txt");
    let zero = dir.path().join("z/scans.txt");
    ok(&["perturb", "--session", p(&prior), "--level", "0", "--out", p(&zero)]);
    let loud = dir.path().join("l/scans.txt");
    ok(&["perturb", "--session", p(&prior), "--level", "1", "--out", p(&loud)]);
    let read = |f: &Path| std::fs::read_to_string(f).unwrap();
    let pose_lines = |f: &Path| read(f).lines().map(String::from).collect::<Vec<_>>();
    assert_eq!(pose_lines(&zero), pose_lines(&prior));
    assert_ne!(pose_lines(&loud), pose_lines(&prior));
}

#[test]
fn demo_pipeline_writes_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("demo/pipeline.sh");
    let o = Command::new("bash")
        .arg(&script)
        .arg(dir.path())
        .env("CHAMELION", env!("CARGO_BIN_EXE_chamelion"))
        .env("CHAMELION_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "setting,voxel,noise_level,tau_scan,tau_map,iou,pr,rr,f1,ms_per_scan");
    assert_eq!(lines.len(), 7);
    assert!(lines[1].starts_with("eval-dualhead,") && lines[2].starts_with("eval-occupancy,"));
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 10);
        for v in &cols[5..9] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{l}");
        }
    }
}
